"""Geometric characterization of trained linear maps.

Spectral entropy here is the Shannon entropy (natural log) of the
singular-value distribution normalized by its L1 sum, i.e. p_i = s_i / sum s.
That convention is reported in every output record as
``entropy_convention = "sigma-l1-natural-log"`` because other normalizations
(s^2) give different numbers. exp(entropy) is the effective rank; the
ceiling is ln C, reached when all singular values are equal (orthogonal W).

The input dominance ratio is mean over sample locations of
||Wx|| / (||Wx|| + ||b||), bounded in [0, 1]; directional agreement is the
median cosine between Wx and Wx + b, skipping locations where Wx = 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .tensorio import FeatureMap, Tensor

ENTROPY_CONVENTION = "sigma-l1-natural-log"
RECONSTRUCTION_TOL = 1e-5


@dataclass
class SvdReport:
    singular_values: np.ndarray  # descending
    energy: np.ndarray  # p_i = s_i / sum(s), sums to 1
    spectral_entropy: float
    effective_rank: float


@dataclass
class BiasReport:
    input_dominance_ratio: float
    directional_mdncs: float | None  # None iff every location was skipped
    bias_norm: float
    skipped_count: int = 0


def svd_analyze(w: np.ndarray | Tensor) -> SvdReport:
    """Full SVD of a square weight matrix with entropy of the s-distribution."""
    mat = w.data if isinstance(w, Tensor) else np.asarray(w)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix contains non-finite entries")
    mat = mat.astype(np.float64)
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    recon = (u * s) @ vt
    denom = np.linalg.norm(mat)
    if denom == 0:
        raise ValueError("all-zero matrix has no singular-value distribution")
    rel = np.linalg.norm(recon - mat) / denom
    if rel > RECONSTRUCTION_TOL:
        raise ArithmeticError(f"SVD reconstruction error {rel:.2e} exceeds "
                              f"{RECONSTRUCTION_TOL}")
    energy = s / s.sum()
    positive = energy[energy > 0]
    entropy = float(-(positive * np.log(positive)).sum())
    return SvdReport(s, energy, entropy, float(np.exp(entropy)))


def bias_analyze(w: np.ndarray | Tensor, b: np.ndarray | Tensor,
                 samples: list[FeatureMap] | np.ndarray) -> BiasReport:
    """Compare the weighted inputs Wx against the bias over sample locations.

    ``samples`` is a batch of feature maps (or an [N, C, H, W] array); every
    spatial location contributes one x.
    """
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if isinstance(samples, np.ndarray):
        batch = samples
    else:
        if len(samples) == 0:
            raise ValueError("empty sample batch")
        batch = np.stack([f.tensor.data for f in samples])
    if batch.ndim != 4:
        raise ValueError(f"expected [N, C, H, W] samples, got {batch.shape}")
    if batch.shape[0] == 0:
        raise ValueError("empty sample batch")
    n, c, h, wd = batch.shape
    if w.shape != (c, c) or b.shape != (c,):
        raise ValueError(f"W {w.shape} / b {b.shape} do not match C={c}")
    xs = batch.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, c)
    wx = xs @ w.T.astype(np.float64)
    wx_norms = np.linalg.norm(wx, axis=1)
    b64 = b.astype(np.float64)
    b_norm = float(np.linalg.norm(b64))
    denom = wx_norms + b_norm
    ratios = np.where(denom > 0, wx_norms / np.where(denom > 0, denom, 1.0), 0.0)
    wxb = wx + b64
    live = wx_norms > 0
    skipped = int((~live).sum())
    if live.any():
        dots = np.sum(wx[live] * wxb[live], axis=1)
        norms = wx_norms[live] * np.linalg.norm(wxb[live], axis=1)
        cosines = dots / np.maximum(norms, 1e-30)
        directional = float(np.median(np.clip(cosines, -1.0, 1.0)))
    else:
        directional = None
    return BiasReport(float(ratios.mean()), directional, b_norm, skipped)


def spectrum_curves(reports: list[SvdReport],
                    labels: list[str] | None = None) -> dict:
    """Rank-vs-energy table (one labeled column per report), rows by rank."""
    if not reports:
        raise ValueError("no reports")
    if labels is None:
        labels = [f"report_{i}" for i in range(len(reports))]
    if len(labels) != len(reports):
        raise ValueError("labels must align with reports")
    depth = max(len(r.energy) for r in reports)
    table = {"rank": list(range(1, depth + 1))}
    for label, report in zip(labels, reports):
        column = [float(v) for v in report.energy]
        column += [None] * (depth - len(column))
        table[label] = column
    return table


def write_spectrum_csv(table: dict, path) -> None:
    keys = list(table.keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for i in range(len(table["rank"])):
            writer.writerow([
                table[k][i] if table[k][i] is not None else "" for k in keys
            ])


def analysis_record(model_id: str, stage: str, manipulation_id: str,
                    svd: SvdReport, bias: BiasReport,
                    truncate_to: int | None = 64) -> dict:
    """The serializable analysis record for one trained linear map."""
    sv = [float(v) for v in svd.singular_values]
    if truncate_to is not None:
        sv = sv[:truncate_to]
    return {
        "model_id": model_id,
        "stage": stage,
        "manipulation_id": manipulation_id,
        "singular_values": sv,
        "singular_values_truncated": truncate_to is not None
        and len(svd.singular_values) > truncate_to,
        "spectral_entropy": svd.spectral_entropy,
        "effective_rank": svd.effective_rank,
        "input_dominance_ratio": bias.input_dominance_ratio,
        "directional_mdncs": bias.directional_mdncs,
        "bias_norm": bias.bias_norm,
        "skipped_locations": bias.skipped_count,
        "entropy_convention": ENTROPY_CONVENTION,
    }


def write_analysis_json(record: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
