import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mixsurv.dataio import CohortPreprocessor, SimulationConfig, simulate_cohort, split_cohort  # noqa: E402
from mixsurv.numerics import DTYPE  # noqa: E402
from mixsurv.survival import MixtureSurvivalHead  # noqa: E402

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


SMALL_DIMS = {"clinical": 5, "paraclinical": 4, "demographic": 3, "omics": [10, 8]}


def small_cohort(n=240, seed=0, **overrides):
    cfg = SimulationConfig(n=n, seed=seed, dims=dict(SMALL_DIMS), **overrides)
    return simulate_cohort(cfg)


@pytest.fixture(scope="session")
def prepared():
    """Simulated cohort, preprocessed on its train split, plus the split masks."""
    raw, truth = small_cohort()
    masks = split_cohort(raw, (0.7, 0.15, 0.15), seed=0)
    cohort = CohortPreprocessor().fit_transform(raw, masks[0])
    return cohort, truth, masks


TINY = dict(d_pre=6, embed_dim=8, n_heads=2, n_experts=3, top_k=2, n_bins=6,
            phase1_epochs=3, phase2_epochs=3, phase1_batch_size=64, phase2_batch_size=64)


@pytest.fixture(scope="session")
def fitted(prepared):
    from mixsurv import MixtureSurvival
    cohort, _, masks = prepared
    est = MixtureSurvival(**TINY, random_state=0)
    est.fit(cohort.subset(masks[0]), X_val=cohort.subset(masks[1]))
    return est


def random_head(K, M, B, d_x, seed, risk_input="logits", scale=1.0):
    """A survival head with randomised parameters, including rho and omega."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    edges = np.concatenate([[0.0], np.cumsum(rng.uniform(0.2, 2.0, B))])
    head = MixtureSurvivalHead(d_x, K, M, edges, gate_hidden=16, hazard_hidden=8, risk_input=risk_input)
    with torch.no_grad():
        for p in head.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=DTYPE))
    return head
