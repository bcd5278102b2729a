"""
A small convolutional network written directly in numpy: forward and backward
passes, L1 residual loss, ADAM, training loop, finite-difference gradient
check, and the binary weight format the denoiser bank stores.

Tensors are (batch, channels, height, width). Convolutions are 3x3 "same"
with half-sample symmetric padding; accumulation order is fixed (kernel
offsets in row-major order) so results do not depend on threading.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from decouple import RepositoryEnv

from image_core import fold_symmetric, pad_symmetric

logger = logging.getLogger(__name__)

MAGIC = b"IDBPNN1"
LOG_EVERY = 50


# --- Layers ---


@dataclass(eq=False)
class Conv2d:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"Conv weight must be 4D, got shape {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"Conv kernels must have odd size, got {kh}x{kw}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"Bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels")

    @property
    def in_ch(self):
        return self.weight.shape[1]

    @property
    def out_ch(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class ReLU:
    pass


def _pad(x, ph, pw):
    return pad_symmetric(pad_symmetric(x, 2, ph, ph), 3, pw, pw)


def conv2d_forward(layer: Conv2d, x: np.ndarray) -> np.ndarray:
    """'same' convolution (cross-correlation form) with symmetric padding."""
    if x.ndim != 4 or x.shape[1] != layer.in_ch:
        raise ValueError(f"Input of shape {x.shape} does not match a layer with {layer.in_ch} input channels")
    w = layer.weight
    kh, kw = w.shape[2:]
    ph, pw = kh // 2, kw // 2
    n, _, h, wd = x.shape
    xp = _pad(x, ph, pw)
    out = np.zeros((layer.out_ch, n, h, wd), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(w[:, :, i, j], xp[:, :, i : i + h, j : j + wd], axes=([1], [1]))
    out += layer.bias[:, None, None, None]
    return out.transpose(1, 0, 2, 3)


def conv2d_backward(layer: Conv2d, x: np.ndarray, grad_out: np.ndarray):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    n, _, h, wd = x.shape
    if grad_out.shape != (n, layer.out_ch, h, wd):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {(n, layer.out_ch, h, wd)}")
    w = layer.weight
    kh, kw = w.shape[2:]
    ph, pw = kh // 2, kw // 2
    xp = _pad(x, ph, pw)
    grad_w = np.zeros_like(w)
    grad_xp = np.zeros((layer.in_ch, n, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_w[:, :, i, j] = np.tensordot(
                grad_out, xp[:, :, i : i + h, j : j + wd], axes=([0, 2, 3], [0, 2, 3])
            )
            grad_xp[:, :, i : i + h, j : j + wd] += np.tensordot(w[:, :, i, j], grad_out, axes=([0], [1]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = fold_symmetric(fold_symmetric(grad_xp, 3, pw, pw), 2, ph, ph)
    return grad_x.transpose(1, 0, 2, 3), grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def l1_residual_loss(pred_noise, true_noise):
    """Mean absolute error and its subgradient sign(pred - true) / N."""
    if pred_noise.shape != true_noise.shape:
        raise ValueError(f"Loss shape mismatch: {pred_noise.shape} vs {true_noise.shape}")
    diff = pred_noise - true_noise
    n = diff.size
    return float(np.abs(diff).mean()), (np.sign(diff) / n).astype(pred_noise.dtype)


# --- Network ---


class ConvNet:
    """Chain of Conv2d/ReLU layers. With ``residual`` the net predicts noise and
    ``__call__`` returns input - prediction."""

    def __init__(self, layers, residual=True):
        self.layers = list(layers)
        self.residual = residual
        convs = self.convs
        if not convs:
            raise ValueError("ConvNet needs at least one convolution")
        for a, b in zip(convs, convs[1:]):
            if a.out_ch != b.in_ch:
                raise ValueError(f"Channel chain broken: {a.out_ch} -> {b.in_ch}")
        if residual and (convs[0].in_ch != convs[-1].out_ch):
            raise ValueError("Residual nets need matching input and output channels")

    @property
    def convs(self):
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    @property
    def dtype(self):
        return self.convs[0].weight.dtype

    def parameters(self):
        """Flat list [w0, b0, w1, b1, ...]; arrays are the live parameters."""
        params = []
        for conv in self.convs:
            params.extend([conv.weight, conv.bias])
        return params

    def clone(self):
        layers = [Conv2d(l.weight.copy(), l.bias.copy()) if isinstance(l, Conv2d) else l for l in self.layers]
        return ConvNet(layers, self.residual)

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def predict(self, x, keep=False):
        """Raw network output; with ``keep`` also the per-layer inputs for backward."""
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = conv2d_forward(layer, x) if isinstance(layer, Conv2d) else relu_forward(x)
        return (x, inputs) if keep else x

    def __call__(self, x):
        x = np.asarray(x, dtype=self.dtype)
        pred = self.predict(x)
        return x - pred if self.residual else pred

    def backward(self, inputs, grad_pred):
        """Parameter gradients in parameters() order."""
        grads = []
        g = grad_pred
        for layer, x in zip(reversed(self.layers), reversed(inputs)):
            if isinstance(layer, Conv2d):
                g, gw, gb = conv2d_backward(layer, x, g)
                grads.extend([gb, gw])
            else:
                g = relu_backward(x, g)
        return grads[::-1]

    def loss_and_grads(self, batch):
        pred, inputs = self.predict(batch.inputs.astype(self.dtype, copy=False), keep=True)
        loss, grad = l1_residual_loss(pred, batch.targets.astype(self.dtype, copy=False))
        return loss, self.backward(inputs, grad)


def build_denoiser_net(width=32, depth=6, dtype=np.float32, rng=None, kernel_size=3):
    """depth 3x3 convolutions 1 -> width -> ... -> width -> 1, ReLU between, He init."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    rng = np.random.default_rng(rng)
    chans = [1] + [width] * (depth - 1) + [1]
    layers = []
    for k, (cin, cout) in enumerate(zip(chans, chans[1:])):
        fan_in = cin * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel_size, kernel_size))
        layers.append(Conv2d(w.astype(dtype), np.zeros(cout, dtype=dtype)))
        if k < depth - 1:
            layers.append(ReLU())
    return ConvNet(layers, residual=True)


# --- Optimisation ---


@dataclass(eq=False)
class TrainBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ValueError(f"Inputs {self.inputs.shape} and targets {self.targets.shape} differ in shape")
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise ValueError(f"Batches must be (batch >= 1, channels, h, w), got {self.inputs.shape}")


@dataclass(eq=False)
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=3e-4, **kwargs):
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(state: AdamState, params, grads) -> bool:
    """Bias-corrected ADAM update applied in place. Returns False when the step is
    skipped because a gradient is non-finite."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("ADAM state, parameters and gradients must line up")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"ADAM shape mismatch: {p.shape} / {g.shape} / {m.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        logger.warning("Skipping ADAM step %d: non-finite gradient", state.t + 1)
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return True


@dataclass
class TrainResult:
    net: ConvNet
    losses: list
    skipped_steps: int = 0


def train(net: ConvNet, batches, steps: int, adam: AdamState = None, seed=0) -> TrainResult:
    """Run ``steps`` ADAM steps on ``net`` in place.

    ``batches`` is an iterable of TrainBatch or a callable ``make_batch(rng)``
    drawing from a generator seeded with ``seed``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    params = net.parameters()
    if adam is None:
        adam = AdamState.for_params(params)
    if callable(batches):
        rng = np.random.default_rng(seed)
        stream = (batches(rng) for _ in range(steps))
    else:
        stream = iter(batches)
    losses, skipped = [], 0
    for step in range(steps):
        try:
            batch = next(stream)
        except StopIteration:
            raise ValueError(f"Batch stream ended after {step} of {steps} steps") from None
        loss, grads = net.loss_and_grads(batch)
        if not adam_step(adam, params, grads):
            skipped += 1
        losses.append(loss)
        if step % LOG_EVERY == 0 or step == steps - 1:
            logger.info("step %d/%d  L1 %.5f", step + 1, steps, loss)
    if not net.is_finite():
        raise FloatingPointError("Training produced non-finite parameters")
    return TrainResult(net, losses, skipped)


# --- Verification ---


def gradcheck(net: ConvNet, inputs, targets, h=1e-5, n_checks=20, rng=0, grads=None, floor=1e-7, kink_tol=1e-6):
    """Max relative error between analytic and central-difference gradients on a
    random subset of parameters. ``grads`` overrides the analytic gradients.

    The loss is piecewise linear in each parameter, so a sample whose forward and
    backward one-sided differences disagree straddles a ReLU or L1 kink and is
    skipped. Set ``kink_tol=None`` to keep every sample.
    """
    if net.dtype != np.float64:
        raise ValueError("gradcheck needs a double-precision network")
    rng = np.random.default_rng(rng)
    batch = TrainBatch(np.asarray(inputs, np.float64), np.asarray(targets, np.float64))
    if grads is None:
        _, grads = net.loss_and_grads(batch)
    center, _ = l1_residual_loss(net.predict(batch.inputs), batch.targets)
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        picks = rng.choice(p.size, size=min(n_checks, p.size), replace=False)
        for idx in picks:
            orig = p.flat[idx]
            p.flat[idx] = orig + h
            up, _ = l1_residual_loss(net.predict(batch.inputs), batch.targets)
            p.flat[idx] = orig - h
            down, _ = l1_residual_loss(net.predict(batch.inputs), batch.targets)
            p.flat[idx] = orig
            if kink_tol is not None:
                curvature = abs((up - center) - (center - down))
                if curvature > kink_tol * abs(up - down) + 1e-13:
                    continue
            numeric = (up - down) / (2.0 * h)
            analytic = float(g.flat[idx])
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
            worst = max(worst, err)
    return worst


# --- Persistence ---


def _manifest(net: ConvNet):
    lines = [f"residual {int(net.residual)}"]
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            lines.append("conv " + " ".join(str(d) for d in layer.weight.shape))
        else:
            lines.append("relu")
    return "\n".join(lines)


def save_net(net: ConvNet, path, metadata=None):
    """Write MAGIC, manifest length (uint32 LE), manifest, float32 LE values; plus
    ``<path>.meta.txt`` with key=value metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(net).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for p in net.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    meta_path = path.with_name(path.name + ".meta.txt")
    meta = dict(metadata or {})
    meta_path.write_text("".join(f"{k}={v}\n" for k, v in sorted(meta.items())))
    return path


def load_net(path, dtype=np.float32) -> ConvNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Weight file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not an IDBPNN1 weight file")
    offset = len(MAGIC)
    (n_manifest,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    manifest = raw[offset : offset + n_manifest].decode("utf-8").splitlines()
    offset += n_manifest
    residual = manifest[0] == "residual 1"
    layers = []
    for line in manifest[1:]:
        kind, *dims = line.split()
        if kind == "relu":
            layers.append(ReLU())
            continue
        if kind != "conv":
            raise ValueError(f"Unknown layer type {kind!r} in {path}")
        shape = tuple(int(d) for d in dims)
        n_w, n_b = int(np.prod(shape)), shape[0]
        values = np.frombuffer(raw, dtype="<f4", count=n_w + n_b, offset=offset)
        offset += 4 * (n_w + n_b)
        layers.append(Conv2d(values[:n_w].reshape(shape).astype(dtype), values[n_w:].astype(dtype)))
    if offset != len(raw):
        raise ValueError(f"{path} has {len(raw) - offset} trailing bytes")
    return ConvNet(layers, residual)


def load_metadata(path) -> dict:
    """Key=value sidecar of a weight file."""
    meta_path = Path(path).with_name(Path(path).name + ".meta.txt")
    if not meta_path.exists():
        raise FileNotFoundError(f"Metadata file not found: {meta_path}")
    return dict(RepositoryEnv(str(meta_path)).data)
