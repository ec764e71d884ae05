"""Embedding dispersion statistics and embedding export for external projection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io

EXACT_MAX_ROWS = 2000
DEFAULT_SAMPLE_PAIRS = 100_000
NN_SAMPLE_ROWS = 2000


class DiagnosticsError(ValueError):
    pass


@dataclass
class DispersionReport:
    mean_pairwise_cosine_distance: float
    mean_nearest_neighbor_similarity: float
    num_rows: int
    num_pairs: int
    exact: bool
    std_error: float = 0.0
    groups: dict[str, DispersionReport] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "groups"}
        out["groups"] = {g: r.to_json() for g, r in self.groups.items()}
        return out


def _unit_rows(x: np.ndarray) -> np.ndarray:
    # zero rows stay zero (cosine 0 against everything)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x, dtype=np.float64), where=norms > 0)


def _nearest_neighbor_similarity(xn: np.ndarray, rng) -> float:
    n = xn.shape[0]
    rows = np.arange(n) if n <= NN_SAMPLE_ROWS else np.sort(rng.choice(n, NN_SAMPLE_ROWS,
                                                                         replace=False))
    best = np.empty(len(rows))
    for start in range(0, len(rows), 512):
        block = rows[start:start + 512]
        sims = xn[block] @ xn.T
        sims[np.arange(len(block)), block] = -np.inf
        best[start:start + 512] = sims.max(axis=1)
    return float(best.mean())


def dispersion(embeddings, sample_pairs: int = DEFAULT_SAMPLE_PAIRS, seed: int = 0,
               exact: bool | None = None, groups: dict[str, slice] | None = None
               ) -> DispersionReport:
    """Mean ``1 - cos`` over distinct row pairs and mean nearest-neighbor cosine.

    All pairs are used when ``exact`` (default: at most 2,000 rows); otherwise
    ``sample_pairs`` pairs ``(i, j), i != j`` are drawn uniformly.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise DiagnosticsError("dispersion needs at least 2 rows")
    if sample_pairs < 1:
        raise DiagnosticsError("sample_pairs must be >= 1")
    exact = n <= EXACT_MAX_ROWS if exact is None else exact
    rng = np.random.default_rng(seed)
    xn = _unit_rows(x)
    if exact:
        iu, ju = np.triu_indices(n, k=1)
        dist = 1.0 - (xn @ xn.T)[iu, ju]
    else:
        i = rng.integers(0, n, size=sample_pairs)
        j = rng.integers(0, n - 1, size=sample_pairs)
        j = j + (j >= i)
        dist = 1.0 - np.einsum("pd,pd->p", xn[i], xn[j])
    dist = np.clip(dist, 0.0, 2.0)
    se = 0.0
    if not exact and len(dist) > 1:
        se = float(dist.std(ddof=1) / np.sqrt(len(dist)))
    report = DispersionReport(float(dist.mean()), _nearest_neighbor_similarity(xn, rng), n,
                              len(dist), bool(exact), se)
    for name, sl in (groups or {}).items():
        report.groups[name] = dispersion(x[sl], sample_pairs, seed, None)
    return report


def model_dispersion(model, sample_pairs: int = DEFAULT_SAMPLE_PAIRS, seed: int = 0
                     ) -> DispersionReport:
    """Dispersion of the final fused user and item embeddings, with per-block groups."""
    users, items = model.embeddings()
    U = users.shape[0]
    return dispersion(np.vstack([users, items]), sample_pairs, seed,
                      groups={"user": slice(0, U), "item": slice(U, None)})


@dataclass
class PairedDispersion:
    a: DispersionReport
    b: DispersionReport
    deltas: dict[str, float]

    @property
    def a_more_dispersed(self) -> bool:
        return self.deltas["mean_pairwise_cosine_distance"] > 0

    def verdict(self) -> str:
        d = self.deltas["mean_pairwise_cosine_distance"]
        if d > 0:
            return "a more dispersed than b"
        return "b more dispersed than a" if d < 0 else "equal dispersion"

    def to_json(self) -> dict:
        return {"a": self.a.to_json(), "b": self.b.to_json(), "deltas": self.deltas,
                "verdict": self.verdict()}


def _deltas(a: DispersionReport, b: DispersionReport) -> dict[str, float]:
    out = {k: getattr(a, k) - getattr(b, k)
           for k in ("mean_pairwise_cosine_distance", "mean_nearest_neighbor_similarity")}
    for g in a.groups.keys() & b.groups.keys():
        for k, v in _deltas(a.groups[g], b.groups[g]).items():
            out[f"{g}.{k}"] = v
    return out


def compare_variants(model_a, model_b, sample_pairs: int = DEFAULT_SAMPLE_PAIRS,
                     seed: int = 0) -> PairedDispersion:
    """Side-by-side dispersion of two models trained on the same data (deltas are a - b)."""
    ua, ia = model_a.embeddings()
    ub, ib = model_b.embeddings()
    if ua.shape[0] != ub.shape[0] or ia.shape[0] != ib.shape[0]:
        raise DiagnosticsError("models were trained on different user/item sets")
    if ua.shape[1] != ub.shape[1]:
        raise DiagnosticsError(f"embedding width {ua.shape[1]} != {ub.shape[1]}")
    ra = model_dispersion(model_a, sample_pairs, seed)
    rb = model_dispersion(model_b, sample_pairs, seed)
    return PairedDispersion(ra, rb, _deltas(ra, rb))


# -- export -------------------------------------------------------------------------------

KINDS = ("ego", "neighbor", "modal_final")


def parse_selector(selector: str, modalities) -> list[tuple[str, str | None]]:
    """``fused``, ``all``, ``<kind>`` (every modality) or ``<kind>:<modality>``."""
    if selector == "fused":
        return [("fused", None)]
    if selector == "all":
        return [("fused", None)] + [(k, m) for k in KINDS for m in modalities]
    kind, _, mod = selector.partition(":")
    if kind not in KINDS:
        raise DiagnosticsError(f"unknown selector {selector!r}")
    if mod and mod not in modalities:
        raise DiagnosticsError(f"unknown modality {mod!r} in {selector!r}")
    return [(kind, mod)] if mod else [(kind, m) for m in modalities]


def export_embeddings(model, dataset, which: str, out_dir) -> list[Path]:
    """Write the selected representations as float64 ``MMFT`` files with token sidecars.

    Rows are users then items; tokens are ``u:<token>`` / ``i:<token>``.
    """
    out_dir = Path(out_dir)
    trace = model.forward()
    tokens = [f"u:{t}" for t in dataset.user_tokens] + [f"i:{t}" for t in dataset.item_tokens]
    written = []
    for kind, m in parse_selector(which, model.params.modalities):
        if kind == "fused":
            matrix, name = trace.fused, "fused.mmft"
        else:
            source = getattr(trace, kind)
            if not source:
                raise DiagnosticsError(f"{kind} embeddings need at least one layer")
            matrix, name = source[m], f"{kind}_{m}.mmft"
        path = out_dir / name
        io.write_matrix(path, matrix, tokens, dtype="float64")
        written.append(path)
    return written
