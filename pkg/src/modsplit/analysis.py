"""Layer-wise text/speech hidden-state similarity.

For each probed layer and each alignment pair (text span, speech span) the
pair's cosine matrix is scored by the mean similarity along its optimal
monotonic warping path, normalized against similarity to non-aligned text,
and summed into a per-layer score.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation
from .model import BOS, Modality, SequenceBatch, SplitTransformer, Token

# backtracking preference on ties: diagonal, then (1,0), then (0,1)
_STEPS = ((1, 1), (1, 0), (0, 1))


@dataclass
class LayerStates:
    sample_id: int
    text: list  # per layer: (n_text, d) array
    speech: list  # per layer: (n_speech, d) array
    pairs: list  # AlignmentPair, spans index rows of text/speech
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.text) != len(self.speech):
            raise ContractViolation("text and speech layer counts differ")
        if not self.labels:
            self.labels = [str(i) for i in range(len(self.text))]

    @property
    def n_layers(self) -> int:
        return len(self.text)


def collect_states(model: SplitTransformer, text_ids, speech_ids, pairs, sample_id: int = 0) -> LayerStates:
    """Hidden states of the embedding output and every shared block for both renderings."""

    def run(ids, modality):
        seq = [Token(modality, BOS)] + [Token(modality, int(i)) for i in ids]
        if len(seq) > model.config.max_seq:
            raise ContractViolation(f"sample of length {len(seq)} exceeds max_seq")
        with torch.no_grad():
            hidden = model.trunk(SequenceBatch.from_sequences([seq]))
        return [h[0, 1:].double().numpy().copy() for h in hidden]

    labels = ["embed"] + [f"shared.{i}" for i in range(model.config.n_shared)]
    return LayerStates(sample_id, run(text_ids, Modality.TEXT), run(speech_ids, Modality.SPEECH), list(pairs), labels)


def cosine_matrix(text_rows, speech_rows) -> np.ndarray:
    """Pairwise cosines; a zero-norm row has cosine 0 with everything."""
    a = np.asarray(text_rows, dtype=np.float64)
    b = np.asarray(speech_rows, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation("cosine_matrix needs two 2-D arrays with equal widths")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    na_safe = np.where(na > 0, na, 1.0)
    nb_safe = np.where(nb > 0, nb, 1.0)
    m = (a / na_safe[:, None]) @ (b / nb_safe[:, None]).T
    m[na == 0, :] = 0.0
    m[:, nb == 0] = 0.0
    return np.clip(m, -1.0, 1.0)


@dataclass
class DtwResult:
    path: list
    score: float
    total: float


def _dtw_cells(cells, U: int, V: int):
    """Max-sum DP over a batch of U x V matrices given cell by cell in row-major order.

    Each entry of ``cells`` is an array of shape (n,) or anything that
    broadcasts to it. Returns the best path sum per matrix and, per cell, a
    boolean array marking the matrices whose chosen path visits that cell.
    """
    n = max(int(np.size(c)) for c in cells)
    acc = [None] * (U * V)
    choice = [None] * (U * V)
    acc[0] = np.broadcast_to(np.asarray(cells[0], dtype=np.float64), (n,))
    for u in range(U):
        for v in range(V):
            c = u * V + v
            if c == 0:
                continue
            best = ch = None
            for k, (du, dv) in enumerate(_STEPS):
                if u < du or v < dv:
                    continue
                a = acc[(u - du) * V + (v - dv)]
                if best is None:
                    best, ch = a, np.int8(k)
                else:
                    better = a > best  # strict: earlier steps win ties
                    best = np.where(better, a, best)
                    ch = np.where(better, np.int8(k), ch)
            acc[c] = best + np.asarray(cells[c], dtype=np.float64)
            choice[c] = ch
    # walk back from the end: a cell is on the path if a successor on the path chose it
    on = [np.zeros(n, dtype=bool) for _ in range(U * V)]
    on[-1][:] = True
    for c in range(U * V - 1, 0, -1):
        u, v = divmod(c, V)
        for k, (du, dv) in enumerate(_STEPS):
            if u >= du and v >= dv:
                on[(u - du) * V + (v - dv)] |= on[c] & (choice[c] == k)
    return np.broadcast_to(acc[-1], (n,)), on


def dtw_batch(Ms):
    """DTW for a stack of equally shaped matrices (n, U, V).

    Returns (totals, scores, masks) with ``masks[i]`` the (U, V) boolean
    path of matrix i.
    """
    Ms = np.asarray(Ms, dtype=np.float64)
    if Ms.ndim != 3 or Ms.shape[0] == 0 or Ms.shape[1] == 0 or Ms.shape[2] == 0:
        raise ContractViolation("dtw needs a nonempty (n, U, V) stack of matrices")
    n, U, V = Ms.shape
    totals, on = _dtw_cells(list(Ms.reshape(n, U * V).T), U, V)
    masks = np.stack(on, axis=1).reshape(n, U, V)
    return totals.copy(), totals / masks.sum(axis=(1, 2)), masks


def dtw(M) -> DtwResult:
    """Max-sum monotonic path from (0,0) to (U-1,V-1); score is the path mean.

    Steps are (1,1), (1,0), (0,1); on equal sums the path whose last steps
    prefer the diagonal, then (1,0), wins.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ContractViolation("dtw needs a nonempty matrix")
    totals, scores, masks = dtw_batch(M[None])
    path = [(int(u), int(v)) for u, v in zip(*np.nonzero(masks[0]))]
    return DtwResult(path, float(scores[0]), float(totals[0]))


def background(speech_rows, text_rows, aligned) -> float:
    """Mean cosine between the pair's speech rows and all text rows outside ``aligned``."""
    aligned = set(aligned)
    others = [i for i in range(len(text_rows)) if i not in aligned]
    if not others or len(speech_rows) == 0:
        return 0.0
    return float(cosine_matrix(np.asarray(text_rows)[others], speech_rows).mean())


@dataclass
class SimilarityReport:
    sample_id: int
    labels: list
    matrices: list  # [layer][pair] cosine matrix
    dtw: list  # [layer][pair]
    bg: list  # [layer][pair]
    full: list  # [layer] whole-utterance text x speech cosine matrix
    lam: float | None = None
    ss: list | None = None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "labels": self.labels,
            "lambda": self.lam,
            "dtw": self.dtw,
            "bg": self.bg,
            "ss": self.ss,
        }


def analyze_sample(states: LayerStates) -> SimilarityReport:
    """First pass: per-layer, per-pair DTW and BG. λ and SS are filled by :func:`layer_scores`."""
    if not states.pairs:
        raise ContractViolation(f"sample {states.sample_id} has no alignment pairs")
    mats, dtws, bgs, full = [], [], [], []
    for ht, hs in zip(states.text, states.speech):
        lm, ld, lb = [], [], []
        for p in states.pairs:
            t0, t1 = p.text
            s0, s1 = p.speech
            if t1 <= t0 or s1 <= s0 or t1 > len(ht) or s1 > len(hs):
                raise ContractViolation(f"alignment pair {p} outside the sample")
            M = cosine_matrix(ht[t0:t1], hs[s0:s1])
            lm.append(M)
            ld.append(dtw(M).score)
            lb.append(background(hs[s0:s1], ht, range(t0, t1)))
        mats.append(lm)
        dtws.append(ld)
        bgs.append(lb)
        full.append(cosine_matrix(ht, hs))
    return SimilarityReport(states.sample_id, list(states.labels), mats, dtws, bgs, full)


def layer_scores(reports) -> float:
    """Second pass: λ = mean DTW over every layer/pair/sample; SS_i = Σ_j DTW/(BG+λ).

    Writes ``lam`` and ``ss`` onto each report and returns λ.
    """
    values = [d for r in reports for layer in r.dtw for d in layer]
    if not reports or any(len(layer) == 0 for r in reports for layer in r.dtw):
        raise ContractViolation("every layer needs at least one alignment pair")
    lam = float(np.mean(values))
    for r in reports:
        r.lam = lam
        r.ss = [float(sum(d / (b + lam) for d, b in zip(ld, lb))) for ld, lb in zip(r.dtw, r.bg)]
    return lam


def analyze(states_list) -> list[SimilarityReport]:
    reports = [analyze_sample(s) for s in states_list]
    layer_scores(reports)
    return reports


# --------------------------------------------------------------------------
# artifacts


def matrix_csv(M) -> str:
    buf = io.StringIO()
    for row in np.asarray(M):
        buf.write(",".join(f"{float(x):.9g}" for x in row))
        buf.write("\n")
    return buf.getvalue()


def parse_matrix_csv(text: str) -> np.ndarray:
    rows = [[float(x) for x in line.split(",")] for line in text.splitlines() if line]
    return np.asarray(rows, dtype=np.float64)


def pgm_bytes(M) -> bytes:
    """Binary greyscale heatmap: cosine -1 -> 0, +1 -> 255 (floor of the linear map)."""
    M = np.asarray(M, dtype=np.float64)
    px = np.floor((np.clip(M, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def curve_csv(values, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "label", "ss"])
    for i, (lab, v) in enumerate(zip(labels, values)):
        w.writerow([i, lab, repr(float(v))])
    return buf.getvalue()


def curve_svg(values, width=480, height=240, pad=20) -> str:
    values = [float(v) for v in values]
    lo, hi = min(values), max(values)
    span = hi - lo or 1.0
    n = max(len(values) - 1, 1)
    pts = " ".join(
        f"{pad + i * (width - 2 * pad) / n:.2f},{height - pad - (v - lo) / span * (height - 2 * pad):.2f}"
        for i, v in enumerate(values)
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<polyline fill="none" stroke="black" points="{pts}"/></svg>\n'
    )


def mean_curve(reports) -> list[float]:
    return [float(x) for x in np.mean([r.ss for r in reports], axis=0)]


def emit(reports, out_dir) -> list[Path]:
    """Write per-sample heatmaps/CSVs/curves plus the across-sample mean curve."""
    out = Path(out_dir)
    written = []

    def put(path, data):
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            path.write_text(data, encoding="utf-8")
        else:
            path.write_bytes(data)
        written.append(path)

    for r in reports:
        if r.ss is None:
            raise ContractViolation("report has no SS values; run layer_scores first")
        d = out / f"sample{r.sample_id}"
        for i, M in enumerate(r.full):
            put(d / f"layer{i}.csv", matrix_csv(M))
            put(d / f"layer{i}.pgm", pgm_bytes(M))
        put(d / "ss_curve.csv", curve_csv(r.ss, r.labels))
        put(d / "ss_curve.svg", curve_svg(r.ss))
        put(d / "report.json", json.dumps(r.to_json(), indent=1) + "\n")
    if reports:
        m = mean_curve(reports)
        put(out / "mean_ss_curve.csv", curve_csv(m, reports[0].labels))
        put(out / "mean_ss_curve.svg", curve_svg(m))
    return written
