import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lfpca import StudyDesign, Subject


def make_design(rng, n_subjects=8, visits=4, q=1, spread=2.0):
    """Random design: sorted positive times, extra covariates uniform.

    ``visits`` may be an int or a per-subject sequence.
    """
    counts = [visits] * n_subjects if np.isscalar(visits) else list(visits)
    subjects = []
    for i, j_i in enumerate(counts):
        times = np.sort(rng.uniform(0.0, spread, j_i))
        cols = [np.ones(j_i), times]
        for _ in range(q - 1):
            cols.append(rng.uniform(-1.0, 1.0, j_i))
        subjects.append(Subject(f"s{i:03d}", np.column_stack(cols)))
    return StudyDesign(subjects)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
