"""The per-keypoint prediction network and its training machinery.

A small PointNet-style block: a shared per-point MLP over the 9-channel
group members, a max-pool over each group, then three head MLPs emitting
class probabilities, the 27 box-point offset scalars and one confidence
value per keypoint. Forward, loss and analytic gradients are written out
explicitly in numpy (float64) so the whole training path is deterministic
and finite-difference checkable.

Shapes, for K keypoints with G group members and c classes:
    input features  (K, G, 9)
    pooled features (K, h2)
    output          (K, 9*3 + c + 1)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, DivergenceError, InvalidInputError

PARAM_KEYS = (
    "point_w1", "point_b1", "point_w2", "point_b2",
    "seg_w1", "seg_b1", "seg_w2", "seg_b2",
    "reg_w1", "reg_b1", "reg_w2", "reg_b2",
    "conf_w1", "conf_b1", "conf_w2", "conf_b2",
)

INPUT_DIM = 9
OFFSET_DIM = 27  # 9 box points * 3


@dataclass
class ConfidenceParams:
    """Parameters of the offset-error to confidence mapping."""

    alpha: float = 2.0
    d_th: float = 0.06  # m, cutoff distance

    def __post_init__(self):
        if self.alpha <= 0 or self.d_th <= 0:
            raise InvalidInputError("alpha and d_th must be positive")


@dataclass
class LossWeights:
    seg: float = 1.0
    reg: float = 1.0
    conf: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if min(self.seg, self.reg, self.conf) < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if self.seg == self.reg == self.conf == 0:
            raise InvalidInputError("at least one loss weight must be positive")


@dataclass
class EncoderParams:
    """All weights of the encoder and heads, keyed by PARAM_KEYS."""

    hidden_point: int
    hidden_feature: int
    hidden_head: int
    num_classes: int
    arrays: dict

    def copy(self) -> "EncoderParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(seed, hidden_point=32, hidden_feature=128, hidden_head=64,
                num_classes=2) -> EncoderParams:
    """He-initialized weights and small random biases, deterministic per
    seed. Nonzero biases keep pre-activations off the exact ReLU kink, so
    finite-difference probes of the gradient stay well posed."""
    rng = np.random.default_rng(seed)
    h1, h2, h3, c = hidden_point, hidden_feature, hidden_head, num_classes

    def dense(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))

    def bias(n_out):
        return rng.normal(0.0, 0.01, size=n_out)

    arrays = {
        "point_w1": dense(INPUT_DIM, h1), "point_b1": bias(h1),
        "point_w2": dense(h1, h2), "point_b2": bias(h2),
        "seg_w1": dense(h2, h3), "seg_b1": bias(h3),
        "seg_w2": dense(h3, c), "seg_b2": bias(c),
        "reg_w1": dense(h2, h3), "reg_b1": bias(h3),
        "reg_w2": dense(h3, OFFSET_DIM), "reg_b2": bias(OFFSET_DIM),
        "conf_w1": dense(h2, h3), "conf_b1": bias(h3),
        "conf_w2": dense(h3, 1), "conf_b2": bias(1),
    }
    return EncoderParams(h1, h2, h3, c, arrays)


@dataclass
class Prediction:
    """Per-keypoint network output."""

    class_probs: np.ndarray  # (K, c), rows sum to 1
    offsets: np.ndarray      # (K, 9, 3), meters
    confidence: np.ndarray   # (K,), in [0, 1]

    def __post_init__(self):
        k = len(self.class_probs)
        if self.offsets.shape != (k, 9, 3) or self.confidence.shape != (k,):
            raise InvalidInputError("prediction field shapes are inconsistent")
        if k and np.abs(self.class_probs.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidInputError("class probabilities are not normalized")

    def __len__(self):
        return len(self.class_probs)


@dataclass
class KeypointTargets:
    """Ground truth per keypoint: class label and, where the label is
    positive, the 9 box-point offsets. Background rows carry zeros that the
    loss never reads."""

    class_labels: np.ndarray  # (K,), 0 = background
    offsets: np.ndarray       # (K, 9, 3)


def confidence_target(d3d, alpha=None, params: ConfidenceParams | None = None,
                      d_th=None):
    """Map the mean offset error d3d (meters) to a confidence in [0, 1).

    Returns 1 - exp(-alpha * (1 - d3d / d_th)) below the cutoff d_th and 0
    from the cutoff on. Works elementwise on arrays.
    """
    if params is None:
        params = ConfidenceParams(alpha if alpha is not None else 2.0,
                                  d_th if d_th is not None else 0.06)
    d = np.asarray(d3d, dtype=np.float64)
    capped = np.minimum(d, params.d_th)  # keeps the discarded branch finite
    inside = 1.0 - np.exp(-params.alpha * (1.0 - capped / params.d_th))
    out = np.where(d < params.d_th, inside, 0.0)
    return float(out) if np.isscalar(d3d) else out


def build_targets(scene, keypoint_indices) -> KeypointTargets:
    """Targets for the keypoints of a labeled scene.

    A keypoint on instance j gets that instance's class and the offsets
    from the keypoint position to each of the instance's 9 posed box
    points. Background keypoints get class 0 and zero offsets.
    """
    kp = np.asarray(keypoint_indices, dtype=np.int64)
    if not scene.cloud.labeled:
        raise DataError("scene cloud has no labels")
    classes = scene.cloud.class_ids[kp].astype(np.int64)
    instances = scene.cloud.instance_ids[kp]
    by_id = {inst.instance_id: inst for inst in scene.instances}

    offsets = np.zeros((len(kp), 9, 3))
    positions = scene.cloud.positions[kp]
    for row in np.nonzero(classes > 0)[0]:
        inst = by_id.get(int(instances[row]))
        if inst is None:
            raise DataError(f"keypoint labeled with unknown instance {instances[row]}")
        offsets[row] = inst.control_points - positions[row]
    return KeypointTargets(classes, offsets)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(params: EncoderParams, features: np.ndarray):
    """Run the network; returns the Prediction plus every intermediate
    needed by the backward pass."""
    a = params.arrays
    if features.ndim != 3 or features.shape[2] != INPUT_DIM:
        raise InvalidInputError(f"expected (K, G, {INPUT_DIM}) features, got {features.shape}")

    z1 = features @ a["point_w1"] + a["point_b1"]          # (K, G, h1)
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ a["point_w2"] + a["point_b2"]                # (K, G, h2)
    a2 = np.maximum(z2, 0.0)
    pool_arg = a2.argmax(axis=1)                           # (K, h2), first index wins ties
    pooled = np.take_along_axis(a2, pool_arg[:, None, :], axis=1)[:, 0, :]

    def head(prefix):
        zh = pooled @ a[prefix + "_w1"] + a[prefix + "_b1"]
        ah = np.maximum(zh, 0.0)
        return zh, ah, ah @ a[prefix + "_w2"] + a[prefix + "_b2"]

    seg_z, seg_a, seg_logits = head("seg")
    reg_z, reg_a, reg_out = head("reg")
    conf_z, conf_a, conf_out = head("conf")

    probs = _softmax(seg_logits)
    conf = 1.0 / (1.0 + np.exp(-conf_out[:, 0]))
    pred = Prediction(probs, reg_out.reshape(-1, 9, 3), conf)
    cache = dict(features=features, z1=z1, a1=a1, z2=z2, a2=a2,
                 pool_arg=pool_arg, pooled=pooled,
                 seg_z=seg_z, seg_a=seg_a, reg_z=reg_z, reg_a=reg_a,
                 conf_z=conf_z, conf_a=conf_a, probs=probs, conf=conf)
    return pred, cache


def _conditioned(sample) -> np.ndarray:
    """Network input: group features with the relative-position channels
    rescaled by the group radius, so position structure is not drowned out
    by the unit-scale color and normal channels. Offsets stay in meters."""
    features = np.array(sample.features, dtype=np.float64)
    radius = max(float(sample.group_radius), 1e-9)
    features[:, :, 0:3] /= radius
    return features


def forward(params: EncoderParams, sample) -> Prediction:
    """Predict class probabilities, offsets and confidence per keypoint."""
    pred, _ = _forward_pass(params, _conditioned(sample))
    return pred


def _smooth_l1(diff, beta):
    absd = np.abs(diff)
    return np.where(absd < beta, 0.5 * diff * diff / beta, absd - 0.5 * beta)


def _smooth_l1_grad(diff, beta):
    return np.clip(diff / beta, -1.0, 1.0)


def _loss_terms(pred_cache, targets: KeypointTargets, weights: LossWeights,
                conf_params: ConfidenceParams, frozen_conf_target=None):
    """Shared by loss and backward: per-term values and the gradients of
    the total loss w.r.t. the three head outputs."""
    probs = pred_cache["probs"]
    k, c = probs.shape
    labels = np.asarray(targets.class_labels, dtype=np.int64)
    if labels.shape != (k,):
        raise InvalidInputError("targets do not match prediction size")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidInputError("class label out of range")

    # segmentation: cross entropy over all keypoints
    picked = np.clip(probs[np.arange(k), labels], 1e-300, None)
    seg = float(-np.log(picked).mean())
    d_logits = probs.copy()
    d_logits[np.arange(k), labels] -= 1.0
    d_logits *= weights.seg / k

    pos = labels > 0
    npos = int(pos.sum())
    pred_off = pred_cache["pred_offsets"]
    conf = pred_cache["conf"]

    d_off = np.zeros_like(pred_off)
    d_conf_out = np.zeros(k)
    if npos:
        diff = pred_off - targets.offsets                      # (K, 9, 3)
        beta = weights.smooth_l1_beta
        reg = float(_smooth_l1(diff[pos], beta).mean())
        d_off[pos] = weights.reg * _smooth_l1_grad(diff[pos], beta) / (npos * OFFSET_DIM)

        # confidence target from the current offsets, treated as constant
        if frozen_conf_target is None:
            d3d = np.linalg.norm(diff, axis=2).mean(axis=1)    # (K,)
            target_conf = confidence_target(d3d, params=conf_params)
        else:
            target_conf = np.asarray(frozen_conf_target, dtype=np.float64)
        conf_err = conf - target_conf
        conf_loss = float((conf_err[pos] ** 2).mean())
        dsig = conf * (1.0 - conf)
        d_conf_out[pos] = weights.conf * 2.0 * conf_err[pos] * dsig[pos] / npos
    else:
        reg = 0.0
        conf_loss = 0.0

    total = weights.seg * seg + weights.reg * reg + weights.conf * conf_loss
    parts = {"seg": seg, "reg": reg, "conf": conf_loss}
    return total, parts, d_logits, d_off.reshape(k, OFFSET_DIM), d_conf_out


def multitask_loss(pred: Prediction, targets: KeypointTargets,
                   weights: LossWeights, conf_params: ConfidenceParams,
                   conf_target=None):
    """Total loss and its (seg, reg, conf) parts.

    Cross entropy runs over every keypoint; the offset and confidence terms
    average over positive keypoints only and are zero for an all-background
    batch. The confidence target is recomputed from the current offsets and
    treated as a constant (pass conf_target to pin it explicitly, e.g. for
    finite-difference checks against the analytic gradient).
    """
    cache = {"probs": pred.class_probs, "pred_offsets": pred.offsets,
             "conf": pred.confidence}
    total, parts, *_ = _loss_terms(cache, targets, weights, conf_params,
                                   frozen_conf_target=conf_target)
    return total, parts


def backward(params: EncoderParams, sample, targets: KeypointTargets,
             weights: LossWeights, conf_params: ConfidenceParams):
    """Loss, loss parts and the analytic gradient for every parameter.

    The max-pool routes gradient to the first maximal group member; the
    confidence target is not differentiated through.
    """
    a = params.arrays
    features = _conditioned(sample)
    pred, cache = _forward_pass(params, features)
    cache["pred_offsets"] = pred.offsets
    total, parts, d_seg_logits, d_reg_out, d_conf_out = _loss_terms(
        cache, targets, weights, conf_params)

    grads = {}
    d_pooled = np.zeros_like(cache["pooled"])

    for prefix, d_out in (("seg", d_seg_logits), ("reg", d_reg_out),
                          ("conf", d_conf_out[:, None])):
        ah, zh = cache[prefix + "_a"], cache[prefix + "_z"]
        grads[prefix + "_w2"] = ah.T @ d_out
        grads[prefix + "_b2"] = d_out.sum(axis=0)
        d_ah = d_out @ a[prefix + "_w2"].T
        d_zh = d_ah * (zh > 0)
        grads[prefix + "_w1"] = cache["pooled"].T @ d_zh
        grads[prefix + "_b1"] = d_zh.sum(axis=0)
        d_pooled += d_zh @ a[prefix + "_w1"].T

    # unpool: gradient lands on the argmax member of each group
    d_a2 = np.zeros_like(cache["a2"])
    np.put_along_axis(d_a2, cache["pool_arg"][:, None, :], d_pooled[:, None, :], axis=1)

    d_z2 = d_a2 * (cache["z2"] > 0)
    kg = d_z2.shape[0] * d_z2.shape[1]
    a1_flat = cache["a1"].reshape(kg, -1)
    d_z2_flat = d_z2.reshape(kg, -1)
    grads["point_w2"] = a1_flat.T @ d_z2_flat
    grads["point_b2"] = d_z2_flat.sum(axis=0)

    d_a1 = d_z2 @ a["point_w2"].T
    d_z1 = d_a1 * (cache["z1"] > 0)
    d_z1_flat = d_z1.reshape(kg, -1)
    grads["point_w1"] = features.reshape(kg, -1).T @ d_z1_flat
    grads["point_b1"] = d_z1_flat.sum(axis=0)

    return total, parts, grads


@dataclass
class TrainResult:
    params: EncoderParams
    curve: list  # one dict per epoch: epoch, phase, total, seg, reg, conf
    velocity: dict


def train(samples, epochs, learning_rate=1e-3, momentum=0.0, batch_scenes=1,
          seed=0, phase1_epochs=0, weights: LossWeights | None = None,
          conf_params: ConfidenceParams | None = None,
          params: EncoderParams | None = None, velocity: dict | None = None,
          start_epoch: int = 0, network_sizes=(32, 128, 64, 2)) -> TrainResult:
    """SGD over (GroupedSample, KeypointTargets) pairs.

    Epochs below phase1_epochs zero the offset and confidence weights so
    the segmentation head trains first. Sample order reshuffles each epoch
    from a seed derived from (seed, epoch), and parameters are updated from
    the mean gradient over each batch, so a run is reproducible bit-exactly
    and can resume from (params, velocity, start_epoch).
    """
    if not samples:
        raise InvalidInputError("training needs at least one sample")
    if weights is None:
        weights = LossWeights()
    if conf_params is None:
        conf_params = ConfidenceParams()
    if params is None:
        params = init_params([seed, 0], *network_sizes)
    else:
        params = params.copy()
    if velocity is None:
        velocity = params.zeros_like()
    else:
        velocity = {k: v.copy() for k, v in velocity.items()}

    seg_only = LossWeights(weights.seg, 0.0, 0.0, weights.smooth_l1_beta)
    curve = []
    for epoch in range(start_epoch, epochs):
        phase = 1 if epoch < phase1_epochs else 2
        w = seg_only if phase == 1 else weights
        order = np.random.default_rng([seed, 1, epoch]).permutation(len(samples))

        sums = {"total": 0.0, "seg": 0.0, "reg": 0.0, "conf": 0.0}
        for start in range(0, len(order), batch_scenes):
            batch = order[start : start + batch_scenes]
            acc = params.zeros_like()
            for idx in batch:
                sample, targets = samples[idx]
                total, parts, grads = backward(params, sample, targets, w, conf_params)
                if not np.isfinite(total):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} sample {idx}: "
                        f"seg={parts['seg']} reg={parts['reg']} conf={parts['conf']}"
                    )
                for key in PARAM_KEYS:
                    acc[key] += grads[key]
                sums["total"] += total
                for name in ("seg", "reg", "conf"):
                    sums[name] += parts[name]
            scale = 1.0 / len(batch)
            for key in PARAM_KEYS:
                g = acc[key] * scale
                velocity[key] = momentum * velocity[key] - learning_rate * g
                params.arrays[key] += velocity[key]
        n = float(len(order))
        curve.append({"epoch": epoch, "phase": phase,
                      "total": sums["total"] / n, "seg": sums["seg"] / n,
                      "reg": sums["reg"] / n, "conf": sums["conf"] / n})
    return TrainResult(params, curve, velocity)


def oracle_predictor(scene, keypoint_indices, noise_sigma=0.0, seed=0,
                     conf_params: ConfidenceParams | None = None) -> Prediction:
    """Ground-truth-derived prediction with controllable Gaussian noise.

    Emits the true class one-hot, the true offsets plus isotropic noise of
    the given sigma, and the confidence the realized offset error maps to.
    Lets the decoder run end to end without a trained network.
    """
    if conf_params is None:
        conf_params = ConfidenceParams()
    targets = build_targets(scene, keypoint_indices)
    k = len(targets.class_labels)
    num_classes = max(2, int(targets.class_labels.max()) + 1)

    probs = np.zeros((k, num_classes))
    probs[np.arange(k), targets.class_labels] = 1.0

    rng = np.random.default_rng([seed, 2])
    noise = rng.normal(0.0, noise_sigma, size=(k, 9, 3)) if noise_sigma > 0 else np.zeros((k, 9, 3))
    offsets = targets.offsets + noise
    pos = targets.class_labels > 0
    offsets[~pos] = 0.0

    conf = np.zeros(k)
    d3d = np.linalg.norm(noise[pos], axis=2).mean(axis=1) if pos.any() else np.zeros(0)
    conf[pos] = confidence_target(d3d, params=conf_params)
    return Prediction(probs, offsets, conf)


CHECKPOINT_MAGIC = b"PPNC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: EncoderParams, velocity: dict | None = None,
                    meta: dict | None = None):
    """Versioned binary container: JSON header with shapes, then the raw
    little-endian float64 payload. Round-trips bit-exactly."""
    names = list(PARAM_KEYS)
    extra = sorted(velocity.keys()) if velocity else []
    header = {
        "version": CHECKPOINT_VERSION,
        "sizes": [params.hidden_point, params.hidden_feature,
                  params.hidden_head, params.num_classes],
        "arrays": [{"name": n, "shape": list(params.arrays[n].shape)} for n in names],
        "velocity": [{"name": n, "shape": list(velocity[n].shape)} for n in extra],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params.arrays[n], dtype="<f8").tobytes())
        for n in extra:
            fh.write(np.ascontiguousarray(velocity[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, velocity_or_None, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version = int(np.frombuffer(blob, "<u4", 1, 4)[0])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(blob, "<u8", 1, 8)[0])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt checkpoint header") from None

    pos = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        need = count * 8
        if len(blob) - pos < need:
            raise DataError(f"{path}: truncated checkpoint payload")
        arrays[entry["name"]] = np.frombuffer(blob, "<f8", count, pos).reshape(shape).copy()
        pos += need
    velocity = {}
    for entry in header["velocity"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        velocity[entry["name"]] = np.frombuffer(blob, "<f8", count, pos).reshape(shape).copy()
        pos += count * 8
    missing = [k for k in PARAM_KEYS if k not in arrays]
    if missing:
        raise DataError(f"{path}: checkpoint missing arrays {missing}")
    h1, h2, h3, c = header["sizes"]
    params = EncoderParams(h1, h2, h3, c, arrays)
    return params, (velocity or None), header.get("meta", {})
