"""Small feedforward relevance scorer trained from scratch in numpy.

The model maps an embedding to a single relevance logit through a stack of
tanh hidden layers.  The penultimate activation doubles as the representation
used for distribution-aware sample selection.  Everything is kept in one flat
float64 parameter vector so checkpoints, interpolation, and partial-freeze
training stay trivial to reason about.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dataset import RelevanceGrade
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    NonFiniteValueError,
    TruncatedPayloadError,
)
from .util import canonical_json, sub_rng

CHECKPOINT_MAGIC = b"DARL"
CHECKPOINT_VERSION = 1

_ACTIVATION_TAGS = {"tanh": 1}
_TAG_ACTIVATIONS = {tag: name for name, tag in _ACTIVATION_TAGS.items()}

TRAINABLE_CHOICES = ("head", "backbone", "all")

# Hard cross-entropy target per grade: irrelevant maps to 0, both weak and
# strong relevance map to the positive side; the KL prior separates the two.
_BINARY_TARGET = np.array([0.0, 1.0, 1.0], dtype=np.float64)


@dataclass(frozen=True)
class ModelArch:
    """Shape of the scorer: input width, hidden widths, activation."""

    input_dims: int = 32
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dims <= 0:
            raise ConfigError("input_dims", "must be positive")
        if not self.hidden:
            raise ConfigError("hidden", "needs at least one hidden layer")
        if any(w <= 0 for w in self.hidden):
            raise ConfigError("hidden", "all hidden widths must be positive")
        if self.activation not in _ACTIVATION_TAGS:
            raise ConfigError(
                "activation",
                f"unsupported activation {self.activation!r}; choose from "
                f"{sorted(_ACTIVATION_TAGS)}",
            )

    @property
    def rep_dims(self) -> int:
        """Width of the representation (last hidden layer)."""
        return self.hidden[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, hidden layers first, head last."""
        widths = (self.input_dims, *self.hidden)
        shapes = [(widths[i], widths[i + 1]) for i in range(len(self.hidden))]
        shapes.append((self.rep_dims, 1))
        return shapes

    @property
    def backbone_count(self) -> int:
        shapes = self.layer_shapes()[:-1]
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in shapes)

    @property
    def head_count(self) -> int:
        return self.rep_dims + 1

    @property
    def param_count(self) -> int:
        return self.backbone_count + self.head_count

    def descriptor(self) -> dict:
        return {
            "activation": self.activation,
            "hidden": list(self.hidden),
            "input_dims": self.input_dims,
        }

    def fingerprint(self) -> str:
        digest = hashlib.sha256(canonical_json(self.descriptor()).encode("utf-8"))
        return digest.hexdigest()


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector partitioned into backbone and head."""

    arch: ModelArch
    values: np.ndarray

    def __post_init__(self) -> None:
        vec = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vec.ndim != 1 or vec.size != self.arch.param_count:
            raise DimensionMismatchError(
                f"parameter vector has {vec.size} values, arch needs "
                f"{self.arch.param_count}"
            )
        if not np.all(np.isfinite(vec)):
            raise NonFiniteValueError("non-finite model parameter")
        vec.flags.writeable = False
        object.__setattr__(self, "values", vec)

    @property
    def backbone(self) -> np.ndarray:
        return self.values[: self.arch.backbone_count]

    @property
    def head(self) -> np.ndarray:
        return self.values[self.arch.backbone_count :]

    def replace_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, values)


def trainable_slice(arch: ModelArch, trainable: str) -> slice:
    """Contiguous region of the flat vector covered by a trainable choice."""
    if trainable == "head":
        return slice(arch.backbone_count, arch.param_count)
    if trainable == "backbone":
        return slice(0, arch.backbone_count)
    if trainable == "all":
        return slice(0, arch.param_count)
    raise ConfigError(
        "trainable", f"must be one of {TRAINABLE_CHOICES}, got {trainable!r}"
    )


def _layer_views(arch: ModelArch, vec: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reshape the flat vector into per-layer (weights, bias) views."""
    views = []
    offset = 0
    for fan_in, fan_out in arch.layer_shapes():
        w = vec[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = vec[offset : offset + fan_out]
        offset += fan_out
        views.append((w, b))
    return views


def init_model(arch: ModelArch, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, deterministic in seed."""
    rng = sub_rng(seed, "model-init")
    vec = np.zeros(arch.param_count, dtype=np.float64)
    offset = 0
    for fan_in, fan_out in arch.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        count = fan_in * fan_out
        vec[offset : offset + count] = rng.uniform(-bound, bound, size=count)
        offset += count + fan_out  # biases stay zero
    return ModelParams(arch, vec)


class ForwardResult(NamedTuple):
    probs: np.ndarray
    logits: np.ndarray
    reps: np.ndarray


def _check_inputs(arch: ModelArch, x: np.ndarray) -> np.ndarray:
    batch = np.asarray(x, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != arch.input_dims:
        raise DimensionMismatchError(
            f"input has shape {np.asarray(x).shape}, model expects "
            f"(n, {arch.input_dims})"
        )
    if not np.all(np.isfinite(batch)):
        raise NonFiniteValueError("non-finite model input")
    return batch


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_batch(params: ModelParams, x: np.ndarray) -> ForwardResult:
    """Probabilities, logits, and representations for a batch of inputs."""
    batch = _check_inputs(params.arch, x)
    _, probs, logits, activations = _forward_full(params, batch)
    return ForwardResult(probs=probs, logits=logits, reps=activations[-1])


def forward(params: ModelParams, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Single-sample scorer output: (probability, representation)."""
    result = forward_batch(params, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return float(result.probs[0]), result.reps[0]


def representations(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations, the space used for OOD scoring."""
    return forward_batch(params, x).reps


def predict_scores(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward_batch(params, x).probs


def _forward_full(
    params: ModelParams, batch: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray, np.ndarray, list[np.ndarray]]:
    """Forward pass keeping every activation for backprop.

    Returns (pre_activations, probs, logits, activations) where
    activations[i] is the output of hidden layer i and activations[-1]
    is the representation feeding the head.
    """
    views = _layer_views(params.arch, params.values)
    activations: list[np.ndarray] = []
    pres: list[np.ndarray] = []
    a = batch
    for w, b in views[:-1]:
        s = a @ w + b
        a = np.tanh(s)
        pres.append(s)
        activations.append(a)
    head_w, head_b = views[-1]
    logits = (a @ head_w + head_b)[:, 0]
    probs = _sigmoid(logits)
    return pres, probs, logits, activations


@dataclass(frozen=True)
class CalibrationPrior:
    """Grade-conditional Bernoulli priors smoothed by a single factor.

    With smoothing factor rho, the prior over {0, 1} is [1-rho, rho] for
    irrelevant samples, [2*rho, 1-2*rho] for weak relevance, and
    [rho, 1-rho] for strong relevance.  rho < 1/3 keeps the weak prior on
    the positive side and every entry strictly positive.
    """

    rho: float = 0.1

    def __post_init__(self) -> None:
        if not (0.0 < self.rho < 1.0 / 3.0):
            raise ConfigError("rho", "must lie strictly between 0 and 1/3")

    def table(self) -> dict[RelevanceGrade, tuple[float, float]]:
        r = self.rho
        return {
            RelevanceGrade.IR: (1.0 - r, r),
            RelevanceGrade.WR: (2.0 * r, 1.0 - 2.0 * r),
            RelevanceGrade.SR: (r, 1.0 - r),
        }

    def positive_mass(self) -> np.ndarray:
        """Prior mass on the positive outcome, indexed by grade value."""
        r = self.rho
        return np.array([r, 1.0 - 2.0 * r, 1.0 - r], dtype=np.float64)

    def target_logits(self) -> np.ndarray:
        """logit of the positive prior mass, indexed by grade value."""
        q1 = self.positive_mass()
        return np.log(q1) - np.log1p(-q1)


class LossValues(NamedTuple):
    total: float
    ce: float
    kl: float


def _check_grades(grades: np.ndarray, n: int) -> np.ndarray:
    g = np.asarray(grades)
    if g.shape != (n,):
        raise DimensionMismatchError(
            f"grades have shape {g.shape}, expected ({n},)"
        )
    if g.size and (g.min() < 0 or g.max() > 2):
        bad = int(g[(g < 0) | (g > 2)][0])
        raise DataFormatError(f"grade value {bad} has no prior table row")
    return g.astype(np.intp)


def _loss_terms(
    logits: np.ndarray, grades: np.ndarray, prior: CalibrationPrior | None
) -> tuple[LossValues, np.ndarray]:
    """Mean loss plus per-sample dL/dlogit for the summed objective."""
    n = logits.size
    y = _BINARY_TARGET[grades]
    # binary cross-entropy from logits: softplus(z) - y*z
    ce_each = np.logaddexp(0.0, logits) - y * logits
    probs = _sigmoid(logits)
    dz = probs - y
    kl = 0.0
    if prior is not None:
        q1 = prior.positive_mass()[grades]
        q0 = 1.0 - q1
        log_p = -np.logaddexp(0.0, -logits)
        log_1mp = -np.logaddexp(0.0, logits)
        kl_each = probs * (log_p - np.log(q1)) + (1.0 - probs) * (
            log_1mp - np.log(q0)
        )
        kl = float(kl_each.mean())
        # d KL / dz = p(1-p) * (z - logit(q1))
        dz = dz + probs * (1.0 - probs) * (logits - prior.target_logits()[grades])
    ce = float(ce_each.mean())
    return LossValues(total=ce + kl, ce=ce, kl=kl), dz / n


def loss(
    params: ModelParams,
    x: np.ndarray,
    grades: np.ndarray,
    prior: CalibrationPrior | None,
) -> LossValues:
    """Mean calibrated training loss over a batch.

    total = ce + kl where ce is binary cross-entropy against the hard
    target and kl is the divergence from the predicted Bernoulli to the
    grade prior (natural log).  A missing prior drops the kl term.
    """
    batch = _check_inputs(params.arch, x)
    if batch.shape[0] == 0:
        raise DataFormatError("loss needs a nonempty batch")
    g = _check_grades(grades, batch.shape[0])
    _, _, logits, _ = _forward_full(params, batch)
    values, _ = _loss_terms(logits, g, prior)
    return values


def loss_and_grad(
    params: ModelParams,
    x: np.ndarray,
    grades: np.ndarray,
    prior: CalibrationPrior | None,
    trainable: str = "all",
) -> tuple[LossValues, np.ndarray]:
    """Loss plus the exact gradient restricted to the trainable slice.

    The returned vector always has full parameter length with zeros
    outside the selected slice.
    """
    batch = _check_inputs(params.arch, x)
    if batch.shape[0] == 0:
        raise DataFormatError("loss needs a nonempty batch")
    g = _check_grades(grades, batch.shape[0])
    region = trainable_slice(params.arch, trainable)

    pres, _, logits, activations = _forward_full(params, batch)
    values, dz = _loss_terms(logits, g, prior)

    arch = params.arch
    grad_vec = np.zeros(arch.param_count, dtype=np.float64)
    views = _layer_views(arch, params.values)
    grad_views = _layer_views(arch, grad_vec)

    rep = activations[-1]
    head_w, _ = views[-1]
    gw, gb = grad_views[-1]
    if trainable in ("head", "all"):
        gw[:, 0] = rep.T @ dz
        gb[0] = dz.sum()
    if trainable in ("backbone", "all"):
        delta = dz[:, None] * head_w[:, 0][None, :]
        for layer in range(len(arch.hidden) - 1, -1, -1):
            a = activations[layer]
            delta = delta * (1.0 - a * a)
            below = batch if layer == 0 else activations[layer - 1]
            gw, gb = grad_views[layer]
            gw[...] = below.T @ delta
            gb[...] = delta.sum(axis=0)
            if layer > 0:
                w, _ = views[layer]
                delta = delta @ w.T
    # zero anything outside the mask (cheap; keeps the contract explicit)
    mask = np.zeros(arch.param_count, dtype=bool)
    mask[region] = True
    grad_vec[~mask] = 0.0
    return values, grad_vec


@dataclass
class OptState:
    """Adam state over one contiguous trainable slice of the parameters."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trainable: str = "all"
    step: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))


def init_opt(arch: ModelArch, lr: float = 5e-4, trainable: str = "all") -> OptState:
    region = trainable_slice(arch, trainable)
    size = region.stop - region.start
    return OptState(
        lr=lr,
        trainable=trainable,
        m=np.zeros(size, dtype=np.float64),
        v=np.zeros(size, dtype=np.float64),
    )


def adam_step(
    opt: OptState, params: ModelParams, grad_vec: np.ndarray
) -> tuple[OptState, ModelParams]:
    """One bias-corrected Adam update on the trainable slice."""
    grad_vec = np.asarray(grad_vec, dtype=np.float64)
    if grad_vec.shape != (params.arch.param_count,):
        raise DimensionMismatchError(
            f"gradient has shape {grad_vec.shape}, expected "
            f"({params.arch.param_count},)"
        )
    region = trainable_slice(params.arch, opt.trainable)
    if opt.m.size != region.stop - region.start:
        raise DimensionMismatchError(
            "optimizer state does not match the trainable slice"
        )
    g = grad_vec[region]
    t = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = m / (1.0 - opt.beta1**t)
    v_hat = v / (1.0 - opt.beta2**t)
    new_values = params.values.copy()
    new_values[region] -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    new_opt = OptState(
        lr=opt.lr,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
        trainable=opt.trainable,
        step=t,
        m=m,
        v=v,
    )
    return new_opt, params.replace_values(new_values)


def interpolate(phi_lp: ModelParams, phi_ft: ModelParams, alpha: float) -> ModelParams:
    """Elementwise blend alpha * fine-tuned + (1 - alpha) * probe."""
    if phi_lp.arch != phi_ft.arch:
        raise DimensionMismatchError("checkpoints have different architectures")
    alpha = float(alpha)
    if not np.isfinite(alpha) or not (0.0 <= alpha <= 1.0):
        raise ConfigError("alpha", "must lie in [0, 1]")
    if alpha == 0.0:
        return phi_lp.replace_values(phi_lp.values.copy())
    if alpha == 1.0:
        return phi_ft.replace_values(phi_ft.values.copy())
    blended = alpha * phi_ft.values + (1.0 - alpha) * phi_lp.values
    return phi_lp.replace_values(blended)


def _arch_blob(arch: ModelArch) -> bytes:
    parts = [struct.pack("<II", arch.input_dims, len(arch.hidden))]
    parts.append(struct.pack(f"<{len(arch.hidden)}I", *arch.hidden))
    parts.append(struct.pack("<B", _ACTIVATION_TAGS[arch.activation]))
    parts.append(bytes.fromhex(arch.fingerprint()))
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic, version, arch descriptor, count, float64 payload, CRC32."""
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    header += _arch_blob(params.arch)
    header += struct.pack("<Q", params.arch.param_count)
    payload = np.ascontiguousarray(params.values, dtype="<f8").tobytes()
    body = header + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def load_checkpoint(path, expected_arch: ModelArch | None = None) -> ModelParams:
    """Read a checkpoint back, verifying CRC, shape, and fingerprint."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, count: int) -> None:
        if offset + count > len(blob):
            raise TruncatedPayloadError(
                f"checkpoint needs {count} bytes at offset {offset}, file "
                f"has {len(blob)}",
                offset=len(blob),
            )

    need(0, 4)
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic in {path}", offset=0)
    need(4, 4)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    need(8, 8)
    input_dims, n_hidden = struct.unpack_from("<II", blob, 8)
    need(16, 4 * n_hidden + 1 + 32)
    hidden = struct.unpack_from(f"<{n_hidden}I", blob, 16)
    offset = 16 + 4 * n_hidden
    (act_tag,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    if act_tag not in _TAG_ACTIVATIONS:
        raise CheckpointError(f"unknown activation tag {act_tag}")
    stored_print = blob[offset : offset + 32].hex()
    offset += 32
    try:
        arch = ModelArch(input_dims, tuple(hidden), _TAG_ACTIVATIONS[act_tag])
    except ConfigError as exc:
        raise CheckpointError(f"invalid checkpoint architecture: {exc}") from exc
    if stored_print != arch.fingerprint():
        raise CheckpointError("architecture fingerprint does not match descriptor")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(
            f"checkpoint architecture {arch.descriptor()} does not match "
            f"expected {expected_arch.descriptor()}"
        )
    need(offset, 8)
    (count,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if count != arch.param_count:
        raise CheckpointError(
            f"checkpoint declares {count} parameters, architecture needs "
            f"{arch.param_count}"
        )
    need(offset, 8 * count)
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).copy()
    offset += 8 * count
    need(offset, 4)
    (stored_crc,) = struct.unpack_from("<I", blob, offset)
    actual_crc = zlib.crc32(blob[:offset]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"checkpoint CRC mismatch (stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x})"
        )
    if offset + 4 != len(blob):
        raise DataFormatError(
            f"{len(blob) - offset - 4} trailing bytes after checkpoint CRC",
            offset=offset + 4,
        )
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NonFiniteValueError(f"non-finite parameter at index {bad}")
    return ModelParams(arch, values)
