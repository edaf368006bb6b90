"""Central finite-difference verification of every differentiable operation.

All checks run in float64 with step h=1e-5. The reported figure is
max |analytic - numeric| / max(|analytic|, |numeric|, 1e-4); the 1e-4 floor
turns the comparison absolute for near-zero gradients, where the finite
difference itself carries ~1e-9 of roundoff noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


def numeric_gradient(f: Callable[[], Tensor], leaves: Sequence[Tensor],
                     h: float = DEFAULT_STEP) -> list[np.ndarray]:
    """Central differences of a scalar-valued closure w.r.t. each leaf."""
    grads = []
    with T.no_grad():
        for leaf in leaves:
            g = np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


def analytic_gradient(f: Callable[[], Tensor], leaves: Sequence[Tensor]) -> list[np.ndarray]:
    for leaf in leaves:
        leaf.grad = None
    loss = f()
    loss.backward()
    return [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
            for leaf in leaves]


def max_relative_error(f: Callable[[], Tensor], leaves: Sequence[Tensor],
                       h: float = DEFAULT_STEP) -> float:
    analytic = analytic_gradient(f, leaves)
    numeric = numeric_gradient(f, leaves, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _leaf(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _kink_free(rng: np.random.Generator, shape) -> Tensor:
    """Uniform values bounded away from zero, for ReLU-containing paths."""
    mag = rng.uniform(0.1, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=True)


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Gradient-check every operation the training path differentiates."""
    from . import model as M
    from . import pretext as P
    from .layers import LayerParams, build_toy_extractor, conv_layer, fc_layer, forward_layer, pool_layer

    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def check(name: str, f, leaves):
        results.append(CheckResult(name, max_relative_error(f, leaves)))

    # conv2d (weights, bias, input), projected to a scalar with fixed noise
    x = _leaf(rng, (2, 2, 7, 7))
    conv = conv_layer(rng, "conv", 2, 3, 3, padding=1, dtype=np.float64)
    conv.weight.data[:] = rng.uniform(-0.5, 0.5, conv.weight.data.shape)
    conv.bias.data[:] = rng.uniform(-0.2, 0.2, conv.bias.data.shape)
    conv.activation = None
    proj = Tensor(rng.uniform(-1, 1, (2, 3, 7, 7)))
    check("conv2d", lambda: T.tsum(T.mul(forward_layer(x, conv), proj)),
          [x, conv.weight, conv.bias])

    # maxpool2d
    xp = _leaf(rng, (2, 3, 6, 6))
    pool = pool_layer("pool", 2, 2)
    projp = Tensor(rng.uniform(-1, 1, (2, 3, 3, 3)))
    check("maxpool2d", lambda: T.tsum(T.mul(forward_layer(xp, pool), projp)), [xp])

    # fully connected
    xf = _leaf(rng, (4, 7))
    fc = fc_layer(rng, "fc", 7, 5, dtype=np.float64)
    fc.weight.data[:] = rng.uniform(-0.5, 0.5, fc.weight.data.shape)
    fc.bias.data[:] = rng.uniform(-0.2, 0.2, fc.bias.data.shape)
    projf = Tensor(rng.uniform(-1, 1, (4, 5)))
    check("fully_connected", lambda: T.tsum(T.mul(forward_layer(xf, fc), projf)),
          [xf, fc.weight, fc.bias])

    # activations
    xr = _kink_free(rng, (5, 6))
    projr = Tensor(rng.uniform(-1, 1, (5, 6)))
    check("relu", lambda: T.tsum(T.mul(T.relu(xr), projr)), [xr])
    xt = _leaf(rng, (5, 6), -2, 2)
    check("tanh", lambda: T.tsum(T.mul(T.tanh(xt), projr)), [xt])
    xs = _leaf(rng, (5, 6), -3, 3)
    check("sigmoid", lambda: T.tsum(T.mul(T.sigmoid(xs), projr)), [xs])

    # softmax over instances, log-softmax over classes
    sm = _leaf(rng, (7, 1), -2, 2)
    projs = Tensor(rng.uniform(-1, 1, (7, 1)))
    check("softmax", lambda: T.tsum(T.mul(T.softmax(sm, axis=0), projs)), [sm])
    ls = _leaf(rng, (5, 8), -2, 2)
    projl = Tensor(rng.uniform(-1, 1, (5, 8)))
    check("log_softmax", lambda: T.tsum(T.mul(T.log_softmax(ls, axis=1), projl)), [ls])

    # attention pooling: features (K, M), V (L, M), w (L, 1)
    feats = _leaf(rng, (5, 8))
    V = _leaf(rng, (4, 8))
    w = _leaf(rng, (4, 1))
    projz = Tensor(rng.uniform(-1, 1, (1, 8)))
    def attention_loss():
        z, _ = M.attention_pool_raw(feats, V, w)
        return T.tsum(T.mul(z, projz))
    check("attention_pooling", attention_loss, [feats, V, w])

    # bag classification loss through sigmoid probabilities
    logits = _leaf(rng, (4, 1), -2, 2)
    labels = [1, 0, 1, 0]
    check("mil_loss", lambda: M.mil_loss(T.sigmoid(logits), labels), [logits])

    # pretext losses on a full 3x4 slice of feature rows
    m_dim = 6
    sfeat = _leaf(rng, (12, m_dim))
    rel_head = P.build_ssl_head(rng, "rel", 2 * m_dim, 5, P.N_RELATIVE_CLASSES, dtype=np.float64)
    slice_items = [(i, i) for i in range(12)]
    pairs = P.build_pairs(slice_items)
    check("relative_loss", lambda: P.relative_loss([pairs], sfeat, rel_head),
          [sfeat, rel_head.fc1.weight, rel_head.fc1.bias, rel_head.fc2.weight, rel_head.fc2.bias])
    abs_head = P.build_ssl_head(rng, "abs", m_dim, 5, P.N_POSITIONS, dtype=np.float64)
    check("absolute_loss", lambda: P.absolute_loss([slice_items], sfeat, abs_head),
          [sfeat, abs_head.fc1.weight, abs_head.fc1.bias, abs_head.fc2.weight, abs_head.fc2.bias])

    # weighted combination of the two losses
    la = _leaf(rng, (1, 1), 0.1, 2.0)
    lb = _leaf(rng, (1, 1), 0.1, 2.0)
    check("total_loss", lambda: P.total_loss(T.tsum(la), T.tsum(lb), mu=0.3), [la, lb])

    # end to end: toy bag through extractor, attention, classifier, loss
    toy = M.create_mil_model(seed=seed + 1, patch_hw=12, feature_dim=8, attention_dim=4,
                             ssl_hidden=5, dtype=np.float64)
    patches = rng.uniform(0.0, 1.0, size=(3, 12, 12))
    def end_to_end():
        prob, _, _ = M.forward_patches(patches, toy)
        return M.mil_loss(prob, [1])
    check("end_to_end_mil", end_to_end, [p for _, p in M.model_parameters(toy, heads=False)])

    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<20} max rel err {r.max_rel_error:.3e}  (tol {r.tolerance:.0e})")
    return "\n".join(lines)
