"""Synthetic panel generators and estimator-recovery metrics.

Two built-in study templates are provided: smooth one-dimensional curves
on [0, 1] (trigonometric subject-level bases, shifted-Legendre slope bases,
mixture-of-normals scores, optional white noise) and disjoint indicator
blocks on a 3-D lattice (normal scores, no noise). Both are fully
determined by a seed. A third generator synthesizes panels from any fitted
model. Generating bases are unit-normalized per component: subject-level
intercept/slope pairs are normalized jointly as one stacked vector, so the
component eigenvalues carry the full scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blup import ScorePanel, SubjectScores, read_scores_csv, write_scores_csv
from .design import StudyDesign, Subject, apply_covariate_scaling, normalize_covariates
from .errors import ValidationError
from .fit import FittedModel
from .panel import DataPanel, read_panel, write_panel

LATTICE_DIMS = (38, 72, 11)


@dataclass
class ScenarioSpec:
    """Configuration for the built-in generators; seeds fully determine output."""

    scenario: int
    p: int = 750
    n_subjects: int = 100
    n_visits: int = 4
    sigma2: float = 1e-4
    seed: int = 0
    lattice: tuple[int, int, int] = LATTICE_DIMS

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValidationError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.sigma2 < 0:
            raise ValidationError("sigma2 must be nonnegative")
        if self.scenario == 2 and self.sigma2 != 0.0:
            raise ValidationError("the block-lattice scenario has no noise term")
        if self.n_subjects < 1 or self.n_visits < 1 or self.p < 1:
            raise ValidationError("n_subjects, n_visits, and p must be positive")

    @classmethod
    def curves(cls, p: int = 750, sigma2: float = 1e-4, seed: int = 0,
               n_subjects: int = 100, n_visits: int = 4) -> "ScenarioSpec":
        return cls(scenario=1, p=p, sigma2=sigma2, seed=seed,
                   n_subjects=n_subjects, n_visits=n_visits)

    @classmethod
    def blocks(cls, seed: int = 0, n_subjects: int = 150, n_visits: int = 6,
               lattice: tuple[int, int, int] = LATTICE_DIMS) -> "ScenarioSpec":
        p = int(np.prod(lattice))
        return cls(scenario=2, p=p, sigma2=0.0, seed=seed,
                   n_subjects=n_subjects, n_visits=n_visits, lattice=lattice)


@dataclass
class GroundTruth:
    """Generating bases, eigenvalues, and scores for one synthetic panel."""

    phi_x: tuple[np.ndarray, ...]
    phi_w: np.ndarray
    lambda_x: np.ndarray
    lambda_w: np.ndarray
    xi: np.ndarray
    zeta: np.ndarray
    sigma2: float
    seed: int
    score_law: str
    block_coords: list | None = None

    @property
    def n_x(self) -> int:
        return self.phi_x[0].shape[1]

    @property
    def n_w(self) -> int:
        return self.phi_w.shape[1]


def default_eigenvalues(count: int) -> np.ndarray:
    """Geometric decay 1, 1/2, 1/4, ..."""
    return 0.5 ** np.arange(count)


def draw_mixture_scores(rng: np.random.Generator, lam: float, size: int) -> np.ndarray:
    """Equal mixture of two normals centered at +-sqrt(lam/2), each with
    variance lam/2, so the draws have mean 0 and variance exactly lam."""
    centers = np.sqrt(lam / 2.0) * (2 * rng.integers(0, 2, size) - 1)
    return centers + np.sqrt(lam / 2.0) * rng.standard_normal(size)


def draw_scores(rng: np.random.Generator, lambdas: np.ndarray, count: int,
                law: str) -> np.ndarray:
    if law == "mixture":
        return np.column_stack([draw_mixture_scores(rng, lam, count) for lam in lambdas])
    if law == "normal":
        return np.column_stack([np.sqrt(lam) * rng.standard_normal(count) for lam in lambdas])
    raise ValidationError(f"unknown score law {law!r}")


def sample_design(rng: np.random.Generator, n_subjects: int, n_visits: int) -> StudyDesign:
    """Visit times: first visit uniform on (0,1), positive uniform increments,
    then all times standardized over the pooled study."""
    subjects = []
    for i in range(n_subjects):
        steps = rng.uniform(0, 1, n_visits)
        times = np.cumsum(steps)
        z = np.column_stack([np.ones(n_visits), times])
        subjects.append(Subject(f"subj{i:04d}", z))
    design, _ = normalize_covariates(StudyDesign(subjects))
    return design


# ---------------------------------------------------------------------------
# scenario 1: smooth curves
# ---------------------------------------------------------------------------

def curve_bases(p: int):
    """Raw generating functions on the regular grid of p points in [0, 1].

    Subject-level intercepts are sines/cosines, slopes are the first four
    shifted Legendre polynomials, visit-level functions reuse scaled copies
    (a constant, then the first three intercept functions), so the families
    are internally orthogonal but correlated across families.
    """
    v = np.linspace(0.0, 1.0, p)
    c = np.sqrt(2.0 / 3.0)
    x0 = np.column_stack([c * np.sin(2 * np.pi * v), c * np.cos(2 * np.pi * v),
                          c * np.sin(4 * np.pi * v), c * np.cos(4 * np.pi * v)])
    x1 = np.column_stack([np.full(p, 0.5),
                          np.sqrt(3.0) * (2 * v - 1) / 2,
                          np.sqrt(5.0) * (6 * v ** 2 - 6 * v + 1) / 2,
                          np.sqrt(7.0) * (20 * v ** 3 - 30 * v ** 2 + 12 * v - 1) / 2])
    w = np.column_stack([2.0 * x1[:, 0], np.sqrt(4.0 / 3.0) * x0[:, 0],
                         np.sqrt(4.0 / 3.0) * x0[:, 1], np.sqrt(4.0 / 3.0) * x0[:, 2]])
    return x0, x1, w


def _normalize_stacked(parts: list[np.ndarray]) -> None:
    norms = np.sqrt(sum(np.sum(b * b, axis=0) for b in parts))
    for b in parts:
        b /= norms


def generate_scenario1(spec: ScenarioSpec):
    """Curves panel: returns (panel, design, truth)."""
    if spec.scenario != 1:
        raise ValidationError("spec is not a curves scenario")
    rng = np.random.default_rng(spec.seed)
    design = sample_design(rng, spec.n_subjects, spec.n_visits)
    x0, x1, w = curve_bases(spec.p)
    _normalize_stacked([x0, x1])
    _normalize_stacked([w])
    lam_x = default_eigenvalues(4)
    lam_w = default_eigenvalues(4)
    xi = draw_scores(rng, lam_x, design.n_subjects, "mixture")
    zeta = draw_scores(rng, lam_w, design.n, "mixture")
    values = _assemble(design, (x0, x1), w, xi, zeta)
    if spec.sigma2 > 0:
        values += np.sqrt(spec.sigma2) * rng.standard_normal(values.shape)
    truth = GroundTruth(phi_x=(x0, x1), phi_w=w, lambda_x=lam_x, lambda_w=lam_w,
                        xi=xi, zeta=zeta, sigma2=spec.sigma2, seed=spec.seed,
                        score_law="mixture")
    return DataPanel.from_array(values), design, truth


# ---------------------------------------------------------------------------
# scenario 2: indicator blocks on a 3-D lattice
# ---------------------------------------------------------------------------

def block_layout(lattice: tuple[int, int, int]):
    """Eight disjoint, equally sized sub-blocks along the second lattice axis.

    Order follows eigenvalue strength: intercept, slope, then visit-level
    for component 1, then component 2, and so on. Each block spans the full
    first and third axes, so all axial slices look the same. Returns
    (family, component, (y_lo, y_hi)) triples.
    """
    n_blocks = 8
    if lattice[1] < n_blocks:
        raise ValidationError(f"lattice axis 1 must have at least {n_blocks} cells")
    height = lattice[1] // n_blocks
    order = [("x0", 0), ("x1", 0), ("w", 0), ("x0", 1), ("x1", 1), ("w", 1),
             ("x0", 2), ("x1", 2)]
    return [(fam, comp, (b * height, (b + 1) * height)) for b, (fam, comp) in enumerate(order)]


def _block_vector(lattice, y_range) -> np.ndarray:
    vol = np.zeros(lattice)
    vol[:, y_range[0]:y_range[1], :] = 1.0
    return vol.ravel()


def generate_scenario2(spec: ScenarioSpec):
    """Block-lattice panel (noiseless, normal scores): (panel, design, truth)."""
    if spec.scenario != 2:
        raise ValidationError("spec is not a block-lattice scenario")
    rng = np.random.default_rng(spec.seed)
    design = sample_design(rng, spec.n_subjects, spec.n_visits)
    layout = block_layout(spec.lattice)
    p = int(np.prod(spec.lattice))
    n_x, n_w = 3, 2
    x0 = np.zeros((p, n_x))
    x1 = np.zeros((p, n_x))
    w = np.zeros((p, n_w))
    for fam, comp, y_range in layout:
        vec = _block_vector(spec.lattice, y_range)
        {"x0": x0, "x1": x1, "w": w}[fam][:, comp] = vec
    _normalize_stacked([x0, x1])
    _normalize_stacked([w])
    lam_x = default_eigenvalues(n_x)
    lam_w = default_eigenvalues(n_w)
    xi = draw_scores(rng, lam_x, design.n_subjects, "normal")
    zeta = draw_scores(rng, lam_w, design.n, "normal")
    values = _assemble(design, (x0, x1), w, xi, zeta)
    truth = GroundTruth(phi_x=(x0, x1), phi_w=w, lambda_x=lam_x, lambda_w=lam_w,
                        xi=xi, zeta=zeta, sigma2=0.0, seed=spec.seed, score_law="normal",
                        block_coords=[{"family": fam, "component": comp,
                                       "axis1_range": list(rng_)} for fam, comp, rng_ in layout])
    return DataPanel.from_array(values), design, truth


def _assemble(design: StudyDesign, phi_x, phi_w, xi, zeta) -> np.ndarray:
    """Columns mean-free: sum_k Z_c,k Phi_x[k] xi_i + Phi_w zeta_c."""
    z = design.stacked_z()
    subj_of_col = np.repeat(np.arange(design.n_subjects), design.visit_counts)
    values = phi_w @ zeta.T
    for k, basis in enumerate(phi_x):
        coef = xi[subj_of_col] * z[:, k][:, None]   # (n, n_x)
        values += basis @ coef.T
    return values


# ---------------------------------------------------------------------------
# generation from a fitted model
# ---------------------------------------------------------------------------

def generate_from_model(model: FittedModel, design: StudyDesign, *,
                        lambda_x=None, lambda_w=None, score_law: str = "mixture",
                        sigma2: float = 0.0, seed: int = 0, apply_scaling: bool = True):
    """Synthesize a panel from a fitted basis over a (possibly unbalanced)
    design template; returns (panel, truth). Covariates pass through the
    model's training normalization unless disabled."""
    if design.q != model.q:
        raise ValidationError(f"design has q={design.q}, model was fitted with q={model.q}")
    if apply_scaling and model.covariate_scaling:
        design = apply_covariate_scaling(design, model.covariate_scaling)
    lam_x = np.asarray(lambda_x if lambda_x is not None else np.maximum(model.lambda_x, 0.0),
                       dtype=float)
    lam_w = np.asarray(lambda_w if lambda_w is not None else np.maximum(model.lambda_w, 0.0),
                       dtype=float)
    if lam_x.size != model.n_x or lam_w.size != model.n_w:
        raise ValidationError("eigenvalue overrides must match the model orders")
    rng = np.random.default_rng(seed)
    xi = draw_scores(rng, lam_x, design.n_subjects, score_law)
    zeta = draw_scores(rng, lam_w, design.n, score_law)
    phi_x = tuple(panel.to_array() for panel in model.phi_x)
    phi_w = model.phi_w.to_array()
    values = _assemble(design, phi_x, phi_w, xi, zeta)
    values += model.mean[:, None]
    if sigma2 > 0:
        values += np.sqrt(sigma2) * rng.standard_normal(values.shape)
    truth = GroundTruth(phi_x=phi_x, phi_w=phi_w, lambda_x=lam_x, lambda_w=lam_w,
                        xi=xi, zeta=zeta, sigma2=sigma2, seed=seed, score_law=score_law)
    return DataPanel.from_array(values), truth


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------

SCORE_QUANTILES = (0.005, 0.05, 0.5, 0.95, 0.995)


@dataclass
class EvaluationResult:
    """Recovery metrics per family and component.

    vector_distances maps family ("x0".."xq", "w") to sign-aligned squared
    L2 distances; lambda_errors holds signed normalized eigenvalue errors;
    score_errors holds sign-aligned normalized score errors, one column per
    component, with summary quantiles alongside.
    """

    vector_distances: dict[str, np.ndarray]
    lambda_errors: dict[str, np.ndarray]
    score_errors: dict[str, np.ndarray] = field(default_factory=dict)
    score_quantiles: dict[str, np.ndarray] = field(default_factory=dict)

    def families(self):
        return list(self.vector_distances)


def aligned_sq_distance(truth: np.ndarray, estimate: np.ndarray) -> float:
    """min(||t - e||^2, ||t + e||^2): the SVD sign is not identified."""
    return float(min(np.sum((truth - estimate) ** 2), np.sum((truth + estimate) ** 2)))


def evaluate(truth: GroundTruth, model: FittedModel,
             scores: ScorePanel | None = None) -> EvaluationResult:
    """Compare a fitted model (and optionally its scores) to the truth."""
    if model.n_x != truth.n_x or model.n_w != truth.n_w:
        raise ValidationError(
            f"component count mismatch: model ({model.n_x}, {model.n_w}) vs "
            f"truth ({truth.n_x}, {truth.n_w})")
    if model.p != truth.phi_w.shape[0]:
        raise ValidationError("model and truth disagree on p")
    est_x = [panel.to_array() for panel in model.phi_x]
    est_w = model.phi_w.to_array()
    distances: dict[str, np.ndarray] = {}
    for k in range(model.q + 1):
        distances[f"x{k}"] = np.array([
            aligned_sq_distance(truth.phi_x[k][:, m], est_x[k][:, m])
            for m in range(model.n_x)])
    distances["w"] = np.array([
        aligned_sq_distance(truth.phi_w[:, m], est_w[:, m]) for m in range(model.n_w)])
    lambda_errors = {
        "x": (model.lambda_x - truth.lambda_x) / truth.lambda_x,
        "w": (model.lambda_w - truth.lambda_w) / truth.lambda_w,
    }
    result = EvaluationResult(vector_distances=distances, lambda_errors=lambda_errors)
    if scores is None:
        return result
    # Joint sign per component: the intercept/slope blocks flip together.
    sign_x = np.array([
        _sign(sum(truth.phi_x[k][:, m] @ est_x[k][:, m] for k in range(model.q + 1)))
        for m in range(model.n_x)])
    sign_w = np.array([_sign(truth.phi_w[:, m] @ est_w[:, m]) for m in range(model.n_w)])
    xi_hat = scores.xi_matrix() * sign_x
    zeta_hat = scores.zeta_matrix() * sign_w
    result.score_errors["x"] = (truth.xi - xi_hat) / np.sqrt(truth.lambda_x)
    result.score_errors["w"] = (truth.zeta - zeta_hat) / np.sqrt(truth.lambda_w)
    for fam, err in result.score_errors.items():
        result.score_quantiles[fam] = np.quantile(err, SCORE_QUANTILES, axis=0)
    return result


def _sign(value: float) -> float:
    return -1.0 if value < 0 else 1.0


# ---------------------------------------------------------------------------
# truth persistence
# ---------------------------------------------------------------------------

TRUTH_MANIFEST = "truth.json"


def save_truth(truth: GroundTruth, design: StudyDesign, outdir) -> None:
    """Write the ground-truth manifest, bases, and scores for one panel."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "lambda_x": truth.lambda_x.tolist(),
        "lambda_w": truth.lambda_w.tolist(),
        "sigma2": truth.sigma2,
        "seed": truth.seed,
        "score_law": truth.score_law,
        "n_x": truth.n_x,
        "n_w": truth.n_w,
        "p": int(truth.phi_w.shape[0]),
        "block_coords": truth.block_coords,
    }
    with open(outdir / TRUTH_MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for k, basis in enumerate(truth.phi_x):
        write_panel(DataPanel.from_array(basis), outdir / f"phi_x_{k}.lfpb")
    write_panel(DataPanel.from_array(truth.phi_w), outdir / "phi_w.lfpb")
    subjects = []
    for i, subj in enumerate(design.subjects):
        subjects.append(SubjectScores(subject_id=subj.subject_id, xi=truth.xi[i],
                                      zeta=truth.zeta[design.columns(i)],
                                      rank_deficient=False))
    write_scores_csv(ScorePanel(subjects=subjects, n_x=truth.n_x, n_w=truth.n_w),
                     outdir / "scores.csv")


def load_truth(truth_dir) -> GroundTruth:
    truth_dir = Path(truth_dir)
    manifest_path = truth_dir / TRUTH_MANIFEST
    if not manifest_path.is_file():
        raise ValidationError(f"no {TRUTH_MANIFEST} in {truth_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    phi_x = []
    k = 0
    while (truth_dir / f"phi_x_{k}.lfpb").is_file():
        phi_x.append(read_panel(truth_dir / f"phi_x_{k}.lfpb").to_array())
        k += 1
    if not phi_x:
        raise ValidationError(f"no phi_x_*.lfpb files in {truth_dir}")
    phi_w = read_panel(truth_dir / "phi_w.lfpb").to_array()
    scores = read_scores_csv(truth_dir / "scores.csv")
    return GroundTruth(phi_x=tuple(phi_x), phi_w=phi_w,
                       lambda_x=np.array(manifest["lambda_x"]),
                       lambda_w=np.array(manifest["lambda_w"]),
                       xi=scores.xi_matrix(), zeta=scores.zeta_matrix(),
                       sigma2=manifest["sigma2"], seed=manifest["seed"],
                       score_law=manifest["score_law"],
                       block_coords=manifest.get("block_coords"))
