import numpy as np
import pytest

from biocompass import diffcore
from biocompass.diffcore import Tape
from biocompass.model import Model, ModelConfig, EncoderConfig
from biocompass.objective import BatchTargets, LossWeights, composite_loss


def tiny_model_config(**overrides) -> ModelConfig:
    defaults = dict(
        encoder=EncoderConfig(gene_count=5, token_dim=3),
        gate_hidden=2, biomarker_dim=2, tide_dim=1, ipres_dim=1, pheno_dim=2,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def random_batch(rng, n_genes=5, batch=3, biomarker_dim=2, pheno_dim=2):
    x = rng.normal(size=(batch, n_genes))
    treatments = np.zeros((batch, 3))
    for i in range(batch):
        bits = rng.choice(3, size=rng.integers(1, 3), replace=False)
        treatments[i, bits] = 1.0
    targets = BatchTargets(
        response=rng.integers(0, 2, size=batch).astype(np.float64),
        pathway=rng.normal(size=(batch, 42)),
        pathway_mask=np.ones((batch, 42)),
        biomarkers=rng.normal(size=(batch, biomarker_dim)),
        biomarker_mask=np.ones((batch, biomarker_dim)),
        aux={"tide": rng.normal(size=(batch, 1)),
             "ipres": rng.normal(size=(batch, 1)),
             "pheno": rng.normal(size=(batch, pheno_dim))},
        aux_masks={"tide": np.ones((batch, 1)), "ipres": np.ones((batch, 1)),
                   "pheno": np.ones((batch, pheno_dim))},
    )
    return x, treatments, targets


def composite_scalar(model, x, treatments, targets, weights):
    tape = Tape()
    out = model.forward(tape, x, treatments)
    total, _ = composite_loss(tape, out, targets, weights)
    return total, tape


def finite_difference(f, values: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat view."""
    flat = values.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(values.shape)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rel_tol: float = 1e-4, abs_floor: float = 1e-7):
    """Pass where |a - n| <= abs_floor (finite-difference roundoff regime)
    or the relative error is within rel_tol."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(abs_floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.where(diff <= abs_floor, 0.0, diff / denom)
    assert rel.max() <= rel_tol, f"max rel err {rel.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
