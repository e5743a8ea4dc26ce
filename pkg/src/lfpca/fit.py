"""Eigendecomposition of the intrinsic covariances, lifting, and reporting.

The intrinsic covariance matrices live in the r-dimensional singular basis.
Their eigenvectors A are lifted back to voxel space as Phi = V A without
ever forming a p x p covariance: per slice, V^l A = Y^l (U S^{-1/2}) A.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._parallel import ordered_map, resolve_threads
from .design import (CovariateScale, DesignReport, StudyDesign, normalize_covariates,
                     validate_design)
from .errors import IdentifiabilityError, ValidationError
from .gram import (IntrinsicDecomposition, accumulate_gram, eigen_gram, truncated_rank)
from .mom import (IntrinsicCovariances, MomDesign, build_design_matrix, compute_weights,
                  intrinsic_covariances)
from .panel import DataPanel, PanelWriter, center_panel, read_panel, write_panel

ORDER_CAP = 30


@dataclass
class IntrinsicBasis:
    """Truncated eigenstructure of the intrinsic covariances.

    a_x stacks the (q+1) blocks of subject-level eigenvectors; columns are
    orthonormal in the stacked space. Negative eigenvalues among the
    retained components are clipped to zero and counted.
    """

    a_x: np.ndarray
    lambda_x: np.ndarray
    a_w: np.ndarray
    lambda_w: np.ndarray
    spectrum_x: np.ndarray
    spectrum_w: np.ndarray
    clipped_x: int
    clipped_w: int

    @property
    def clipped_count(self) -> int:
        return self.clipped_x + self.clipped_w


def _top_eigen(matrix: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    evals, evecs = np.linalg.eigh(matrix)
    evals, evecs = evals[::-1].copy(), evecs[:, ::-1]
    top, vecs = evals[:count], np.array(evecs[:, :count])
    clipped = int(np.sum(top < 0))
    top = np.maximum(top, 0.0)
    idx = np.abs(vecs).argmax(axis=0)
    flips = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    flips[flips == 0] = 1.0
    vecs *= flips
    return vecs, top, evals, clipped


def decompose_intrinsic(cov: IntrinsicCovariances, n_x: int, n_w: int) -> IntrinsicBasis:
    """Top eigenpairs of the intrinsic covariances, descending, clipped at 0.

    Eigenvector columns are sign-normalized so their largest-magnitude
    entry is positive, which makes outputs reproducible across platforms.
    """
    dim_x, dim_w = cov.k_x.shape[0], cov.k_w.shape[0]
    if not 1 <= n_x <= dim_x:
        raise ValidationError(f"n_x must be in [1, {dim_x}], got {n_x}")
    if not 1 <= n_w <= dim_w:
        raise ValidationError(f"n_w must be in [1, {dim_w}], got {n_w}")
    a_x, lam_x, spec_x, clip_x = _top_eigen(cov.k_x, n_x)
    a_w, lam_w, spec_w, clip_w = _top_eigen(cov.k_w, n_w)
    return IntrinsicBasis(a_x=a_x, lambda_x=lam_x, a_w=a_w, lambda_w=lam_w,
                          spectrum_x=spec_x, spectrum_w=spec_w,
                          clipped_x=clip_x, clipped_w=clip_w)


def select_orders(spectrum_x: np.ndarray, spectrum_w: np.ndarray,
                  threshold: float = 0.9, cap: int = ORDER_CAP) -> tuple[int, int]:
    """Smallest component counts capturing ``threshold`` of each nonnegative
    spectrum, capped. Explicit user choices always take precedence upstream."""
    def pick(spectrum):
        pos = spectrum[spectrum > 0]
        if pos.size == 0:
            return 1
        mass = np.cumsum(pos) / pos.sum()
        return min(int(np.searchsorted(mass, threshold - 1e-15) + 1), cap, pos.size)
    return pick(np.asarray(spectrum_x)), pick(np.asarray(spectrum_w))


def estimate_sigma2(cov: IntrinsicCovariances, lambda_w: np.ndarray, p: int, n_w: int) -> float:
    """White-noise variance from the visit-level trace surplus.

    The visit-level moment estimator absorbs sigma^2 I, so under a low-rank
    model the per-voxel noise variance is the trace left over after the
    retained eigenvalues, divided by the remaining dimensions; clamped at 0.
    """
    if p <= n_w:
        raise ValidationError(f"sigma2 estimator needs p > n_w, got p={p}, n_w={n_w}")
    surplus = cov.trace_w_raw - float(np.sum(lambda_w[:n_w]))
    return max(surplus / (p - n_w), 0.0)


def lift(v: DataPanel, a: np.ndarray, out_path=None, threads: int = 1) -> DataPanel:
    """Phi = V A, computed slice by slice on any p x r panel."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != v.n:
        raise ValidationError(f"matrix must have {v.n} rows to lift this panel, got {a.shape}")
    if out_path is None:
        phi = np.empty((v.p, a.shape[1]))
        for start, block in zip(v.row_starts,
                                ordered_map(lambda it: it[1] @ a, v.iter_slices(), threads)):
            phi[start:start + block.shape[0]] = block
        return DataPanel.from_array(phi, n_slices=v.n_slices)
    with PanelWriter(out_path, v.p, a.shape[1], row_starts=v.row_starts) as writer:
        for block in ordered_map(lambda it: it[1] @ a, v.iter_slices(), threads):
            writer.write_slice(block)
    return read_panel(out_path)


@dataclass
class FittedModel:
    """Everything needed to interpret, score, and reconstruct observations."""

    p: int
    n: int
    q: int
    r: int
    n_x: int
    n_w: int
    a_x: np.ndarray
    a_w: np.ndarray
    lambda_x: np.ndarray
    lambda_w: np.ndarray
    phi_x: tuple[DataPanel, ...]
    phi_w: DataPanel
    sigma2: float
    trace_x: float
    trace_w: float
    clipped_count: int
    mean: np.ndarray
    spectrum_x: np.ndarray
    spectrum_w: np.ndarray
    covariate_scaling: tuple[CovariateScale, ...] = ()

    def x_coefficients(self, k: int) -> np.ndarray:
        """Rows of a_x belonging to covariate k (the block lifted into phi_x[k])."""
        return self.a_x[k * self.r:(k + 1) * self.r]


@dataclass
class VarianceTable:
    """Per-component percentage shares of total variability, plus totals.

    shares_x[k][m] is the percentage carried by component m of the lifted
    family for covariate k; a stacked eigenvector has unit norm, so its
    blocks partition the component's eigenvalue across families.
    """

    shares_x: np.ndarray          # (q+1, rows)
    shares_w: np.ndarray          # (rows,)
    cumulative: np.ndarray        # (rows,)
    trace_x: float
    trace_w: float
    total: float

    @property
    def percent_x(self) -> float:
        """Subject-level share of the two-way split (nonnegative, sums to 100)."""
        pos = max(self.trace_x, 0.0) + max(self.trace_w, 0.0)
        return 100.0 * max(self.trace_x, 0.0) / pos

    @property
    def percent_w(self) -> float:
        pos = max(self.trace_x, 0.0) + max(self.trace_w, 0.0)
        return 100.0 * max(self.trace_w, 0.0) / pos

    def write_csv(self, path) -> None:
        q1, rows = self.shares_x.shape
        with open(path, "w") as fh:
            fh.write("k," + ",".join(f"phi_x{k}" for k in range(q1)) + ",phi_w,cumulative\n")
            for m in range(rows):
                cells = [f"{self.shares_x[k, m]:.17g}" for k in range(q1)]
                fh.write(f"{m + 1}," + ",".join(cells)
                         + f",{self.shares_w[m]:.17g},{self.cumulative[m]:.17g}\n")
            totals = [f"{self.shares_x[k].sum():.17g}" for k in range(q1)]
            fh.write("total," + ",".join(totals)
                     + f",{self.shares_w.sum():.17g},{self.cumulative[-1]:.17g}\n")


def variance_explained(model: FittedModel) -> VarianceTable:
    """Decompose total variability across components and families.

    The denominator is the raw (pre-clipping) trace total; clipped
    components contribute nothing to the numerators. Covariates should be
    normalized for the shares to be comparable across families.
    """
    total = model.trace_x + model.trace_w
    if not total > 0:
        raise ValidationError(f"total variability must be positive, got {total}")
    rows = max(model.n_x, model.n_w)
    shares_x = np.zeros((model.q + 1, rows))
    for k in range(model.q + 1):
        block = model.x_coefficients(k)
        norms = np.sum(block * block, axis=0)
        shares_x[k, :model.n_x] = 100.0 * model.lambda_x * norms / total
    shares_w = np.zeros(rows)
    shares_w[:model.n_w] = 100.0 * model.lambda_w / total
    cumulative = np.cumsum(shares_x.sum(axis=0) + shares_w)
    return VarianceTable(shares_x=shares_x, shares_w=shares_w, cumulative=cumulative,
                         trace_x=model.trace_x, trace_w=model.trace_w, total=total)


@dataclass
class FitResult:
    """Fit outputs plus the intermediates tests and the CLI report on."""

    model: FittedModel
    decomposition: IntrinsicDecomposition
    covariances: IntrinsicCovariances
    scores: "ScorePanel"
    design: StudyDesign
    mom: MomDesign
    gram: np.ndarray
    report: DesignReport | None = None


def fit_panel(panel: DataPanel, design: StudyDesign, *, n_x: int | None = None,
              n_w: int | None = None, rank: int | None = None, var_threshold: float = 0.9999,
              order_threshold: float = 0.9, normalize: bool = True,
              parameterization: str = "general", backend: str = "dense", seed: int = 0,
              threads: int | None = None, workdir=None) -> FitResult:
    """Run the full pipeline: center, SVD via the Gram matrix, moment
    estimation, intrinsic eigendecomposition, lifting, noise variance, and
    per-subject score prediction.

    When ``workdir`` is given (required for file-backed panels), the
    centered panel and the lifted bases are streamed to files there and the
    peak memory footprint stays at O(p/L * n + n^2).
    """
    threads = resolve_threads(threads)
    if panel.n != design.n:
        raise ValidationError(f"panel has {panel.n} columns, design describes {design.n} visits")
    report = validate_design(design)
    if not report.ok:
        raise IdentifiabilityError(str(report))
    scaling: tuple[CovariateScale, ...] = ()
    if normalize:
        design, scaling = normalize_covariates(design)

    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    if panel.centered:
        centered = panel
        mean = panel.mean if panel.mean is not None else np.zeros(panel.p)
    else:
        if panel.file_backed and workdir is None:
            raise ValidationError("fitting a file-backed panel requires a workdir")
        out = workdir / "centered.lfpb" if workdir is not None and panel.file_backed else None
        centered = center_panel(panel, out_path=out, threads=threads)
        mean = centered.mean

    gram = accumulate_gram(centered, threads=threads)
    decomp_full = eigen_gram(gram, backend=backend,
                             rank=rank if backend == "power" else None, seed=seed)
    orders = (n_x, n_w) if (n_x is not None and n_w is not None) else None
    r = truncated_rank(decomp_full.s, rank=rank, var_threshold=var_threshold,
                       model_orders=orders)
    decomp = decomp_full.truncate(r)

    mom = compute_weights(build_design_matrix(design, parameterization))
    covs = intrinsic_covariances(decomp, mom, design, gram=gram)

    if n_x is None or n_w is None:
        spec_x = np.linalg.eigvalsh(covs.k_x)[::-1]
        spec_w = np.linalg.eigvalsh(covs.k_w)[::-1]
        auto_x, auto_w = select_orders(spec_x, spec_w, threshold=order_threshold)
        n_x = n_x if n_x is not None else auto_x
        n_w = n_w if n_w is not None else auto_w
    if n_x > (design.q + 1) * r or n_w > r:
        raise ValidationError(f"orders (n_x={n_x}, n_w={n_w}) exceed the retained rank r={r}")
    basis = decompose_intrinsic(covs, n_x, n_w)
    sigma2 = estimate_sigma2(covs, basis.lambda_w, panel.p, n_w)

    phi_x, phi_w = _lift_basis(centered, decomp, basis, design.q, workdir, threads)
    model = FittedModel(p=panel.p, n=panel.n, q=design.q, r=r, n_x=n_x, n_w=n_w,
                        a_x=basis.a_x, a_w=basis.a_w,
                        lambda_x=basis.lambda_x, lambda_w=basis.lambda_w,
                        phi_x=phi_x, phi_w=phi_w, sigma2=sigma2,
                        trace_x=covs.trace_x_raw, trace_w=covs.trace_w_raw,
                        clipped_count=basis.clipped_count, mean=mean,
                        spectrum_x=basis.spectrum_x, spectrum_w=basis.spectrum_w,
                        covariate_scaling=scaling)
    from .blup import score_blups
    scores = score_blups(model, decomp, design)
    return FitResult(model=model, decomposition=decomp, covariances=covs, scores=scores,
                     design=design, mom=mom, gram=gram, report=report)


def _lift_basis(centered: DataPanel, decomp: IntrinsicDecomposition, basis: IntrinsicBasis,
                q: int, workdir: Path | None, threads: int):
    """One streamed pass producing every lifted family: Phi = Y (U S^{-1/2}) A."""
    r = decomp.r
    proj = decomp.u / np.sqrt(decomp.s)
    mats = [proj @ basis.a_x[k * r:(k + 1) * r] for k in range(q + 1)] + [proj @ basis.a_w]

    if workdir is None:
        outs = [np.empty((centered.p, m.shape[1])) for m in mats]

        def _consume(start, blocks):
            for out, blk in zip(outs, blocks):
                out[start:start + blk.shape[0]] = blk

        finish = lambda: tuple(DataPanel.from_array(o, n_slices=centered.n_slices) for o in outs)
    else:
        names = [workdir / f"phi_x_{k}.lfpb" for k in range(q + 1)] + [workdir / "phi_w.lfpb"]
        writers = [PanelWriter(path, centered.p, m.shape[1], row_starts=centered.row_starts)
                   for path, m in zip(names, mats)]

        def _consume(start, blocks):
            for writer, blk in zip(writers, blocks):
                writer.write_slice(blk)

        def finish():
            for writer in writers:
                writer.close()
            return tuple(read_panel(path) for path in names)

    def _lift_slice(item):
        start, block = item
        return start, [block @ m for m in mats]

    for start, blocks in ordered_map(_lift_slice, centered.iter_slices(), threads):
        _consume(start, blocks)
        blocks = None
    panels = finish()
    return panels[:q + 1], panels[-1]


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

MODEL_FILE = "model.json"
MEAN_FILE = "mean.lfpb"


def save_model(model: FittedModel, outdir) -> None:
    """Write the model directory: model.json, mean.lfpb, and the phi panels."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {
        "p": model.p, "n": model.n, "q": model.q, "r": model.r,
        "n_x": model.n_x, "n_w": model.n_w,
        "a_x": model.a_x.tolist(), "a_w": model.a_w.tolist(),
        "lambda_x": model.lambda_x.tolist(), "lambda_w": model.lambda_w.tolist(),
        "sigma2": model.sigma2, "trace_x": model.trace_x, "trace_w": model.trace_w,
        "clipped_count": model.clipped_count,
        "spectrum_x": model.spectrum_x.tolist(), "spectrum_w": model.spectrum_w.tolist(),
        "covariate_scaling": [{"column": s.column, "shift": s.shift, "scale": s.scale}
                              for s in model.covariate_scaling],
    }
    with open(outdir / MODEL_FILE, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    write_panel(DataPanel.from_array(model.mean[:, None]), outdir / MEAN_FILE)
    for k, phi in enumerate(model.phi_x):
        _ensure_panel_file(phi, outdir / f"phi_x_{k}.lfpb")
    _ensure_panel_file(model.phi_w, outdir / "phi_w.lfpb")


def _ensure_panel_file(panel: DataPanel, path: Path) -> None:
    if panel.file_backed and panel._path == path:
        return
    write_panel(panel, path)


def load_model(model_dir) -> FittedModel:
    """Open a saved model; phi panels stay on disk and are read lazily."""
    model_dir = Path(model_dir)
    meta_path = model_dir / MODEL_FILE
    if not meta_path.is_file():
        raise ValidationError(f"no {MODEL_FILE} in {model_dir}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    mean = read_panel(model_dir / MEAN_FILE).to_array()[:, 0]
    phi_x = tuple(read_panel(model_dir / f"phi_x_{k}.lfpb") for k in range(meta["q"] + 1))
    phi_w = read_panel(model_dir / "phi_w.lfpb")
    scaling = tuple(CovariateScale(column=s["column"], shift=s["shift"], scale=s["scale"])
                    for s in meta["covariate_scaling"])
    return FittedModel(p=meta["p"], n=meta["n"], q=meta["q"], r=meta["r"],
                       n_x=meta["n_x"], n_w=meta["n_w"],
                       a_x=np.array(meta["a_x"]), a_w=np.array(meta["a_w"]),
                       lambda_x=np.array(meta["lambda_x"]), lambda_w=np.array(meta["lambda_w"]),
                       phi_x=phi_x, phi_w=phi_w, sigma2=meta["sigma2"],
                       trace_x=meta["trace_x"], trace_w=meta["trace_w"],
                       clipped_count=meta["clipped_count"], mean=mean,
                       spectrum_x=np.array(meta["spectrum_x"]),
                       spectrum_w=np.array(meta["spectrum_w"]),
                       covariate_scaling=scaling)
