"""Longitudinal functional PCA for high-dimensional panels, out of core.

Decomposes repeatedly measured high-dimensional observations into
subject-level (intercept and slope, or general covariate loadings) and
visit-level components, with score prediction and a simulation harness.
All heavy computation is linear in the observation dimension and streams
the data in row slices.
"""

__version__ = "0.1.0"

from .blup import (ScorePanel, SubjectScores, read_scores_csv, reconstruct, score_blups,
                   score_new_panel, write_scores_csv)
from .design import (CovariateScale, DesignReport, StudyDesign, Subject,
                     apply_covariate_scaling, normalize_covariates, read_metadata,
                     validate_design, write_metadata)
from .errors import IdentifiabilityError, LfpcaError, NumericalError, ValidationError
from .fit import (FitResult, FittedModel, IntrinsicBasis, VarianceTable, decompose_intrinsic,
                  estimate_sigma2, fit_panel, lift, load_model, save_model, select_orders,
                  variance_explained)
from .gram import (IntrinsicDecomposition, accumulate_gram, eigen_gram, left_vectors,
                   truncated_rank)
from .mom import (IntrinsicCovariances, MomDesign, build_design_matrix, compute_weights,
                  intrinsic_covariances)
from .panel import (DataPanel, PanelWriter, center_panel, default_slice_count, panel_from_csv,
                    panel_to_csv, read_panel, write_panel)
from .simulate import (EvaluationResult, GroundTruth, ScenarioSpec, aligned_sq_distance,
                       curve_bases, default_eigenvalues, evaluate, generate_from_model,
                       generate_scenario1, generate_scenario2, load_truth, save_truth)

__all__ = [name for name in dir() if not name.startswith("_")]
