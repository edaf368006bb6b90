"""Attention-based deep MIL model: per-instance features, attention pooling,
bag classification, and the bag-level training loss.

A bag of K patches is embedded instance-by-instance into K feature rows
h_k (dimension M), pooled into a single bag embedding
z = sum_k a_k h_k with softmax attention

    a_k = softmax_k( w^T tanh(V h_k) ),

and classified by one fully connected layer with a sigmoid output. The
pooling is permutation-invariant by construction and the attention weights
expose which instances drove the decision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, EmptyBagError
from .layers import LayerParams, build_extractor, build_toy_extractor, fc_layer, forward_stack, glorot_uniform
from .pretext import N_POSITIONS, N_RELATIVE_CLASSES, SslHead, build_ssl_head
from .tensor import Tensor

PROB_CLAMP = 1e-12

# the standard three-block extractor needs at least this much spatial extent
_MIN_STANDARD_PATCH = 36


@dataclass
class MilModel:
    """Extractor + attention + classifier + the two pretext heads."""

    extractor: list[LayerParams]
    attention_V: Tensor          # (L, M)
    attention_w: Tensor          # (L, 1)
    classifier: LayerParams      # fully connected M -> 1; sigmoid applied at use
    relative_head: SslHead
    absolute_head: SslHead
    patch_hw: int
    feature_dim: int
    attention_dim: int
    ssl_hidden: int
    threshold: float = 0.5

    @property
    def dtype(self):
        return self.classifier.weight.data.dtype


@dataclass
class BagPrediction:
    """Outcome of classifying one bag."""

    probability: float
    label: int
    attention: np.ndarray        # (K,)
    bag_embedding: np.ndarray    # (M,)


def create_mil_model(seed, patch_hw: int = 60, feature_dim: int = 512,
                     attention_dim: int = 128, ssl_hidden: int = 128,
                     threshold: float = 0.5, dtype=np.float32) -> MilModel:
    """Build a freshly initialized model (Glorot weights, zero biases).

    Patches smaller than the standard extractor can handle fall back to a
    one-block toy stack; that configuration is the reduced-dimension test
    double used by the gradient checks.
    """
    rng = np.random.default_rng(seed)
    if patch_hw >= _MIN_STANDARD_PATCH:
        extractor = build_extractor(rng, patch_hw=patch_hw, feature_dim=feature_dim, dtype=dtype)
    else:
        extractor = build_toy_extractor(rng, patch_hw=patch_hw, feature_dim=feature_dim, dtype=dtype)
    V = Tensor(glorot_uniform(rng, (attention_dim, feature_dim),
                              fan_in=feature_dim, fan_out=attention_dim, dtype=dtype),
               requires_grad=True)
    w = Tensor(glorot_uniform(rng, (attention_dim, 1),
                              fan_in=attention_dim, fan_out=1, dtype=dtype),
               requires_grad=True)
    classifier = fc_layer(rng, "classifier", feature_dim, 1, activation=None, dtype=dtype)
    rel_head = build_ssl_head(rng, "relative_head", 2 * feature_dim, ssl_hidden,
                              N_RELATIVE_CLASSES, dtype=dtype)
    abs_head = build_ssl_head(rng, "absolute_head", feature_dim, ssl_hidden,
                              N_POSITIONS, dtype=dtype)
    return MilModel(extractor=extractor, attention_V=V, attention_w=w,
                    classifier=classifier, relative_head=rel_head, absolute_head=abs_head,
                    patch_hw=patch_hw, feature_dim=feature_dim, attention_dim=attention_dim,
                    ssl_hidden=ssl_hidden, threshold=threshold)


def model_parameters(model: MilModel, heads=True) -> list[tuple[str, Tensor]]:
    """Named parameters in a fixed order.

    `heads` may be True (both), False (none), or one of "relative" /
    "absolute" to select a single pretext head.
    """
    params: list[tuple[str, Tensor]] = []
    for layer in model.extractor:
        params.extend(layer.parameters())
    params.append(("attention.V", model.attention_V))
    params.append(("attention.w", model.attention_w))
    params.extend(model.classifier.parameters())
    if heads is True or heads == "relative":
        params.extend(model.relative_head.parameters())
    if heads is True or heads == "absolute":
        params.extend(model.absolute_head.parameters())
    return params


# -- forward -------------------------------------------------------------


def attention_pool_raw(features: Tensor, V: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    """Pool K feature rows into one embedding; returns (z (1,M), a (K,1))."""
    if features.data.ndim != 2:
        raise DimensionError(f"attention pooling expects a K x M matrix, got {features.data.shape}")
    if features.data.shape[0] == 0:
        raise EmptyBagError("cannot pool an empty bag")
    scores = T.matmul(T.tanh(T.matmul(features, T.transpose(V))), w)   # (K, 1)
    a = T.softmax(scores, axis=0)
    z = T.matmul(T.transpose(a), features)                             # (1, M)
    return z, a


def attention_pool(features, model: MilModel) -> tuple[Tensor, Tensor]:
    if not isinstance(features, Tensor):
        features = Tensor(np.asarray(features, dtype=model.dtype))
    return attention_pool_raw(features, model.attention_V, model.attention_w)


def _stack_patches(patches, model: MilModel) -> Tensor:
    arr = np.asarray(patches, dtype=model.dtype)
    if arr.ndim != 3:
        raise DimensionError(f"expected patches shaped (K, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyBagError("bag contains no instances")
    if arr.shape[1] != model.patch_hw or arr.shape[2] != model.patch_hw:
        raise DimensionError(
            f"layer {model.extractor[0].name}: patches are {arr.shape[1]}x{arr.shape[2]}, "
            f"model expects {model.patch_hw}x{model.patch_hw}")
    return Tensor(arr[..., None])  # NHWC with one channel


def forward_patches(patches, model: MilModel) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable forward pass: returns (probability, attention, features)."""
    x = _stack_patches(patches, model)
    features = forward_stack(x, model.extractor)                       # (K, M)
    z, a = attention_pool_raw(features, model.attention_V, model.attention_w)
    logit = T.add(T.matmul(z, T.transpose(model.classifier.weight)), model.classifier.bias)
    prob = T.sigmoid(logit)                                            # (1, 1)
    return prob, a, features


def extract_features(bag, model: MilModel) -> Tensor:
    """Embed every instance of a bag; row k is the feature of instance k."""
    pixels = np.stack([inst.pixels for inst in bag.instances])
    x = _stack_patches(pixels, model)
    return forward_stack(x, model.extractor)


def predict(bag, model: MilModel) -> BagPrediction:
    """Classify one bag (inference only, no graph)."""
    pixels = np.stack([inst.pixels for inst in bag.instances])
    with T.no_grad():
        prob, a, features = forward_patches(pixels, model)
        z = T.matmul(T.transpose(a), features)
    p = prob.item()
    return BagPrediction(probability=p,
                         label=int(p >= model.threshold),
                         attention=a.data.reshape(-1).copy(),
                         bag_embedding=z.data.reshape(-1).copy())


# -- loss ------------------------------------------------------------------


def _as_probability_tensor(predictions) -> Tensor:
    if isinstance(predictions, Tensor):
        return T.reshape(predictions, (predictions.data.size, 1))
    parts = []
    for p in predictions:
        if isinstance(p, Tensor):
            parts.append(T.reshape(p, (1, 1)))
        elif isinstance(p, BagPrediction):
            parts.append(Tensor(np.array([[p.probability]])))
        else:
            parts.append(Tensor(np.array([[float(p)]])))
    return T.concat(parts, axis=0)


def mil_loss(predictions, labels) -> Tensor:
    """Mean binary cross-entropy over bags.

    `predictions` may be a (N,1) probability tensor, or a list of scalar
    tensors / BagPrediction / floats. Log arguments are clamped to
    [1e-12, 1] so saturated probabilities cannot produce non-finite losses.
    """
    p = _as_probability_tensor(predictions)
    n = p.data.shape[0]
    labels = list(labels)
    if len(labels) != n:
        raise ContractError(f"{n} predictions but {len(labels)} labels")
    if n == 0:
        raise ContractError("mil_loss needs at least one bag")
    if any(int(y) not in (0, 1) for y in labels):
        raise ContractError("labels must be 0 or 1")
    y = np.array(labels, dtype=p.data.dtype).reshape(n, 1)
    log_p = T.log(T.clamp(p, PROB_CLAMP, 1.0))
    log_not_p = T.log(T.clamp(T.add(T.scale(p, -1.0), 1.0), PROB_CLAMP, 1.0))
    terms = T.add(T.mul(log_p, y), T.mul(log_not_p, 1.0 - y))
    return T.scale(T.tsum(terms), -1.0 / n)


# -- persistence -----------------------------------------------------------


def save_mil_model(path, model: MilModel) -> None:
    from .checkpoint import save_params

    hyper = {
        "patch_hw": model.patch_hw,
        "feature_dim": model.feature_dim,
        "attention_dim": model.attention_dim,
        "ssl_hidden": model.ssl_hidden,
        "threshold": model.threshold,
        "dtype": np.dtype(model.dtype).name,
    }
    save_params(path, hyper, [(name, t.data) for name, t in model_parameters(model)])


def load_mil_model(path) -> MilModel:
    from .checkpoint import load_params
    from .errors import FormatError

    hyper, params = load_params(path)
    try:
        model = create_mil_model(seed=0,
                                 patch_hw=int(hyper["patch_hw"]),
                                 feature_dim=int(hyper["feature_dim"]),
                                 attention_dim=int(hyper["attention_dim"]),
                                 ssl_hidden=int(hyper["ssl_hidden"]),
                                 threshold=float(hyper["threshold"]),
                                 dtype=np.dtype(hyper["dtype"]))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"checkpoint hyperparameters are incomplete ({e})") from e
    for name, tensor in model_parameters(model):
        if name not in params:
            raise FormatError(f"checkpoint is missing parameter {name}")
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise FormatError(f"checkpoint parameter {name} has shape {arr.shape}, "
                              f"expected {tensor.data.shape}")
        tensor.data = arr.astype(model.dtype)
    return model


# -- attention export ------------------------------------------------------


def rescale_attention_by_slice(attention: np.ndarray, slice_indices) -> np.ndarray:
    """Renormalize attention so it sums to one within every slice."""
    a = np.asarray(attention, dtype=np.float64).reshape(-1)
    slices = np.asarray(slice_indices)
    if slices.shape[0] != a.shape[0]:
        raise ContractError("attention and slice indices must have equal length")
    out = np.empty_like(a)
    for s in np.unique(slices):
        mask = slices == s
        out[mask] = a[mask] / a[mask].sum()
    return out


def attention_records(bag, model: MilModel) -> list[dict]:
    pred = predict(bag, model)
    slices = [inst.slice_index for inst in bag.instances]
    rescaled = rescale_attention_by_slice(pred.attention, slices)
    return [
        {
            "bag_id": bag.id,
            "slice_index": inst.slice_index,
            "grid_position": inst.grid_position,
            "raw_attention": float(pred.attention[i]),
            "slice_rescaled_attention": float(rescaled[i]),
        }
        for i, inst in enumerate(bag.instances)
    ]


def write_attention_csv(path, bags, model: MilModel) -> None:
    fields = ["bag_id", "slice_index", "grid_position", "raw_attention",
              "slice_rescaled_attention"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for bag in bags:
            writer.writerows(attention_records(bag, model))
