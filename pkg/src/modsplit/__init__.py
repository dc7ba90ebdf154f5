"""Modality-split speech/text language modeling at desk scale."""
