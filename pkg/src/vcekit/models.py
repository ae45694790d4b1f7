"""Small convolutional models, their training loops, and checkpoint I/O.

Two architectures: a strided CNN classifier (three blocks in the trained
recipes, a deeper stack for the untrained baseline, and reused as the frozen
feature network behind perceptual metrics) and a two-scale U-Net denoiser
with sinusoidal time conditioning.  Everything runs on the gradient tape
from :mod:`vcekit.tensor`; training is deterministic given its seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tg
from .data import LabeledDataset
from .diffusion import NoiseSchedule, q_sample_batched
from .tensor import Tensor

CLASSIFIER_VARIANTS = ("standard", "robustnoise", "lowcap", "randomnet", "featurenet")

CHECKPOINT_MAGIC = b"VCEB"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training loss went non-finite."""

    def __init__(self, epoch: int, step: int):
        self.epoch = epoch
        self.step = step
        super().__init__(f"loss diverged at epoch {epoch}, step {step}")


# ---------------------------------------------------------------------------
# parameter helpers
# ---------------------------------------------------------------------------


def _he_conv(rng, co, ci, k):
    std = np.sqrt(2.0 / (ci * k * k))
    return (rng.standard_normal((co, ci, k, k)) * std).astype(np.float32)


def _he_linear(rng, fan_in, fan_out):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(np.float32)


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


def _ones(*shape):
    return np.ones(shape, dtype=np.float32)


class ParamStore:
    """Named weight tensors with toggleable trainability."""

    def __init__(self, arrays: dict):
        self.tensors = {k: Tensor(v) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: t.data.astype(dtype) for k, t in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].data.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierArch:
    channels: tuple = (24, 48, 96)
    strides: tuple = (2, 2, 2)
    kernels: tuple = (3, 3, 3)
    embed_dim: int = 64
    n_classes: int = 6
    resolution: int = 16


LOWCAP_ARCH = ClassifierArch(channels=(8, 12, 16), embed_dim=24)

# The untrained baseline is deliberately deeper than the trained recipes:
# with small-std weights and unit biases its activations are offset-dominated,
# so its predictions are near-constant in the input and its input gradients
# carry no class signal for guidance to exploit.
RANDOMNET_ARCH = ClassifierArch(channels=(16, 32, 64, 64, 96),
                                strides=(2, 2, 2, 1, 1),
                                kernels=(3, 3, 3, 3, 3), embed_dim=128)


class Classifier:
    """A stack of strided conv blocks, a linear embedding, and a logit head.

    ``forward`` can also surface intermediate activations: the post-relu conv
    maps (perceptual layers) and the pre-relu embedding.
    """

    def __init__(self, arch: ClassifierArch, params: ParamStore, variant: str,
                 meta: dict | None = None):
        self.arch = arch
        self.params = params
        self.variant = variant
        self.meta = dict(meta or {})

    @staticmethod
    def init(arch: ClassifierArch, seed: int, variant: str) -> "Classifier":
        if len(arch.strides) != len(arch.channels) or len(arch.kernels) != len(arch.channels):
            raise ValueError(f"{len(arch.channels)} conv blocks but "
                             f"{len(arch.strides)} strides / {len(arch.kernels)} kernels")
        rng = np.random.default_rng(seed)
        fixed_std = variant == "randomnet"
        arrays = {}
        ci, spatial = 1, arch.resolution
        for i, (co, st, k) in enumerate(zip(arch.channels, arch.strides, arch.kernels), start=1):
            if fixed_std:
                arrays[f"conv{i}.w"] = (rng.standard_normal((co, ci, k, k)) * 0.01).astype(np.float32)
                arrays[f"conv{i}.b"] = _ones(co) if i > 1 else _zeros(co)
            else:
                arrays[f"conv{i}.w"] = _he_conv(rng, co, ci, k)
                arrays[f"conv{i}.b"] = _zeros(co)
            ci = co
            spatial = (spatial - 1) // st + 1  # odd k, pad=k//2 conv arithmetic
        flat = ci * spatial * spatial
        if fixed_std:
            arrays["embed.w"] = (rng.standard_normal((flat, arch.embed_dim)) * 0.01).astype(np.float32)
            arrays["embed.b"] = _ones(arch.embed_dim)
            arrays["head.w"] = (rng.standard_normal((arch.embed_dim, arch.n_classes)) * 0.01).astype(np.float32)
            arrays["head.b"] = _zeros(arch.n_classes)
        else:
            arrays["embed.w"] = _he_linear(rng, flat, arch.embed_dim)
            arrays["embed.b"] = _zeros(arch.embed_dim)
            arrays["head.w"] = _he_linear(rng, arch.embed_dim, arch.n_classes)
            arrays["head.b"] = _zeros(arch.n_classes)
        return Classifier(arch, ParamStore(arrays), variant, meta={"seed": seed, "epochs_run": 0})

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def n_params(self) -> int:
        return self.params.n_params()

    def forward(self, x: Tensor, want_features: bool = False):
        p = self.params
        feats = {}
        h = x
        for i in range(1, len(self.arch.channels) + 1):
            h = tg.conv2d(h, p[f"conv{i}.w"], stride=self.arch.strides[i - 1],
                          pad=self.arch.kernels[i - 1] // 2)
            h = tg.add(h, p[f"conv{i}.b"])
            h = tg.relu(h)
            feats[f"conv{i}"] = h
        h = tg.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        emb = tg.add(tg.matmul(h, p["embed.w"]), p["embed.b"])
        feats["embed"] = emb
        h = tg.relu(emb)
        logits = tg.add(tg.matmul(h, p["head.w"]), p["head.b"])
        if want_features:
            return logits, feats
        return logits

    def log_probs(self, x: Tensor) -> Tensor:
        return tg.log_softmax(self.forward(x))

    def predict(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Argmax labels for a stack of images, no tape."""
        out = []
        for i in range(0, images.shape[0], batch):
            logits = self.forward(Tensor(images[i:i + batch]))
            out.append(np.argmax(logits.data, axis=1))
        return np.concatenate(out).astype(np.int64)

    def feature_maps(self, images: np.ndarray, batch: int = 256) -> dict:
        """Forward activations for metric computation (no tape)."""
        acc: dict = {}
        for i in range(0, images.shape[0], batch):
            _, feats = self.forward(Tensor(images[i:i + batch]), want_features=True)
            for k, v in feats.items():
                acc.setdefault(k, []).append(v.data)
        return {k: np.concatenate(v) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserArch:
    widths: tuple = (32, 64, 128)
    time_dim: int = 64
    resolution: int = 16
    groups: int = 8
    t_steps: int = 200


def sinusoidal_time_table(t_steps: int, dim: int) -> np.ndarray:
    """Fixed (T, dim) sin/cos positional table for integer timesteps."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.arange(t_steps)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(np.float32)


class Denoiser:
    """Two-scale U-Net noise predictor with additive time conditioning."""

    def __init__(self, arch: DenoiserArch, params: ParamStore, meta: dict | None = None):
        self.arch = arch
        self.params = params
        self.meta = dict(meta or {})
        self.time_table = Tensor(sinusoidal_time_table(arch.t_steps, arch.time_dim),
                                 dtype=params.dtype)

    @staticmethod
    def init(arch: DenoiserArch, seed: int) -> "Denoiser":
        rng = np.random.default_rng(seed)
        w1, w2, w3 = arch.widths
        td = arch.time_dim
        arrays = {
            "tmlp1.w": _he_linear(rng, td, td), "tmlp1.b": _zeros(td),
            "tmlp2.w": _he_linear(rng, td, td), "tmlp2.b": _zeros(td),
            "stem.w": _he_conv(rng, w1, 1, 3), "stem.b": _zeros(w1),
        }
        blocks = [
            ("b1", w1, w1), ("b2", w2, w2), ("b3", w3, w3),
            ("b4", w2 + w2, w2), ("b5", w1 + w1, w1),
        ]
        for name, cin, cout in blocks:
            arrays[f"{name}.t.w"] = _he_linear(rng, td, cin)
            arrays[f"{name}.t.b"] = _zeros(cin)
            arrays[f"{name}.gn.g"] = _ones(cin)
            arrays[f"{name}.gn.b"] = _zeros(cin)
            arrays[f"{name}.conv.w"] = _he_conv(rng, cout, cin, 3)
            arrays[f"{name}.conv.b"] = _zeros(cout)
        arrays.update({
            "down1.w": _he_conv(rng, w2, w1, 3), "down1.b": _zeros(w2),
            "down2.w": _he_conv(rng, w3, w2, 3), "down2.b": _zeros(w3),
            "up1.w": (np.transpose(_he_conv(rng, w2, w3, 2), (1, 0, 2, 3))).copy(), "up1.b": _zeros(w2),
            "up2.w": (np.transpose(_he_conv(rng, w1, w2, 2), (1, 0, 2, 3))).copy(), "up2.b": _zeros(w1),
            "head.gn.g": _ones(w1), "head.gn.b": _zeros(w1),
            "head.w": _he_conv(rng, 1, w1, 3), "head.b": _zeros(1),
        })
        return Denoiser(arch, ParamStore(arrays), meta={"seed": seed, "epochs_run": 0})

    def n_params(self) -> int:
        return self.params.n_params()

    def _groups_for(self, channels: int) -> int:
        g = self.arch.groups
        while channels % g:
            g //= 2
        return max(g, 1)

    def _block(self, name: str, h: Tensor, t_feat: Tensor) -> Tensor:
        p = self.params
        cin = h.shape[1]
        bias = tg.add(tg.matmul(t_feat, p[f"{name}.t.w"]), p[f"{name}.t.b"])
        h = tg.add(h, bias)
        h = tg.group_normalize(h, p[f"{name}.gn.g"], p[f"{name}.gn.b"], self._groups_for(cin))
        h = tg.silu(h)
        h = tg.add(tg.conv2d(h, p[f"{name}.conv.w"], stride=1, pad=1), p[f"{name}.conv.b"])
        return h

    def forward(self, x: Tensor, t: np.ndarray) -> Tensor:
        """Predict the noise component of ``x`` at per-sample timesteps ``t``."""
        p = self.params
        t = np.asarray(t, dtype=np.int64)
        if t.shape != (x.shape[0],):
            raise tg.ShapeError("denoiser", f"t shape {t.shape} does not match batch {x.shape[0]}")
        emb = tg.embedding_lookup(self.time_table, t)
        emb = tg.silu(tg.add(tg.matmul(emb, p["tmlp1.w"]), p["tmlp1.b"]))
        t_feat = tg.add(tg.matmul(emb, p["tmlp2.w"]), p["tmlp2.b"])

        h = tg.add(tg.conv2d(x, p["stem.w"], stride=1, pad=1), p["stem.b"])
        s1 = self._block("b1", h, t_feat)
        h = tg.add(tg.conv2d(s1, p["down1.w"], stride=2, pad=1), p["down1.b"])
        s2 = self._block("b2", h, t_feat)
        h = tg.add(tg.conv2d(s2, p["down2.w"], stride=2, pad=1), p["down2.b"])
        h = self._block("b3", h, t_feat)
        h = tg.add(tg.transpose_conv2d(h, p["up1.w"], stride=2, pad=0), p["up1.b"])
        h = self._block("b4", tg.concat([h, s2], axis=1), t_feat)
        h = tg.add(tg.transpose_conv2d(h, p["up2.w"], stride=2, pad=0), p["up2.b"])
        h = self._block("b5", tg.concat([h, s1], axis=1), t_feat)
        h = tg.group_normalize(h, p["head.gn.g"], p["head.gn.b"], self._groups_for(h.shape[1]))
        h = tg.silu(h)
        return tg.add(tg.conv2d(h, p["head.w"], stride=1, pad=1), p["head.b"])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class TrainParams:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 2e-3
    beta2: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 1.0


class AdaScale:
    """Momentum-free adaptive scaling: second-moment EMA plus norm clipping."""

    def __init__(self, store: ParamStore, hyper: TrainParams):
        self.store = store
        self.hyper = hyper
        self.v = {k: np.zeros_like(t.data) for k, t in store.tensors.items()}
        self.step_count = 0

    def step(self) -> None:
        hp = self.hyper
        grads = {}
        sq = 0.0
        for name, t in self.store.tensors.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            grads[name] = g
            sq += float(np.sum(np.square(g, dtype=np.float64)))
        norm = np.sqrt(sq)
        scale = min(1.0, hp.clip_norm / (norm + 1e-12))
        self.step_count += 1
        bias = 1.0 - hp.beta2 ** self.step_count
        for name, t in self.store.tensors.items():
            g = grads[name] * scale
            v = self.v[name]
            v *= hp.beta2
            v += (1.0 - hp.beta2) * np.square(g)
            t.data -= (hp.lr * g / (np.sqrt(v / bias) + hp.eps)).astype(t.data.dtype)
            t.grad = None


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def _nll_loss(model: Classifier, x: np.ndarray, y: np.ndarray) -> Tensor:
    logp = model.log_probs(Tensor(x))
    onehot = np.zeros(logp.shape, dtype=np.float32)
    onehot[np.arange(y.shape[0]), y] = 1.0
    picked = tg.tsum(tg.mul(logp, Tensor(onehot)))
    return tg.scalar_mul(picked, -1.0 / y.shape[0])


def train_classifier(ds: LabeledDataset, variant: str, hyper: TrainParams, seed: int,
                     noise_sigma_max: float = 0.5, log=None,
                     arch: ClassifierArch | None = None) -> Classifier:
    """Train one classifier variant; ``randomnet`` returns its init untouched.

    ``robustnoise`` corrupts each input with x + sigma * eps, sigma uniform
    in [0, noise_sigma_max] per sample.  ``arch`` overrides the variant's
    stock architecture (class count and resolution still follow the dataset).
    """
    if variant not in CLASSIFIER_VARIANTS:
        raise ValueError(f"unknown classifier variant {variant!r}")
    if arch is None:
        arch = {"lowcap": LOWCAP_ARCH, "randomnet": RANDOMNET_ARCH}.get(variant, ClassifierArch())
    arch = replace(arch, n_classes=ds.n_classes, resolution=ds.resolution)
    model = Classifier.init(arch, seed, variant)
    if variant == "randomnet":
        model.meta["epochs_run"] = 0
        return model
    rng = np.random.default_rng(seed + 1)
    model.params.set_trainable(True)
    opt = AdaScale(model.params, hyper)
    losses = []
    for epoch in range(hyper.epochs):
        for step, idx in enumerate(_batches(ds.n, hyper.batch_size, rng)):
            x = ds.images[idx]
            y = ds.labels[idx]
            if variant == "robustnoise":
                sigma = rng.uniform(0.0, noise_sigma_max, size=(x.shape[0], 1, 1, 1))
                x = (x + sigma * rng.standard_normal(x.shape)).astype(np.float32)
            try:
                loss = _nll_loss(model, x, y)
            except tg.NonFiniteError as e:
                raise DivergenceError(epoch, step) from e
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError(epoch, step)
            tg.backward(loss)
            opt.step()
            losses.append(val)
        if log:
            log(f"{variant} epoch {epoch}: loss {np.mean(losses[-10:]):.4f}")
    model.params.set_trainable(False)
    model.meta.update(epochs_run=hyper.epochs, final_loss=float(np.mean(losses[-10:])))
    return model


def train_denoiser(ds: LabeledDataset, sched: NoiseSchedule, hyper: TrainParams, seed: int,
                   arch: DenoiserArch | None = None, log=None) -> Denoiser:
    """Epsilon-prediction training with uniform timestep sampling."""
    arch = arch or DenoiserArch(resolution=ds.resolution, t_steps=sched.t_steps)
    if arch.t_steps != sched.t_steps:
        raise ValueError(f"arch t_steps {arch.t_steps} != schedule {sched.t_steps}")
    model = Denoiser.init(arch, seed)
    model.params.set_trainable(True)
    rng = np.random.default_rng(seed + 1)
    opt = AdaScale(model.params, hyper)
    losses = []
    for epoch in range(hyper.epochs):
        for step, idx in enumerate(_batches(ds.n, hyper.batch_size, rng)):
            x0 = ds.images[idx]
            t = rng.integers(0, sched.t_steps, size=x0.shape[0])
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = q_sample_batched(x0, t, eps, sched)
            try:
                pred = model.forward(Tensor(x_t), t)
                diff = tg.sub(pred, Tensor(eps))
                loss = tg.mean(tg.mul(diff, diff))
            except tg.NonFiniteError as e:
                raise DivergenceError(epoch, step) from e
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError(epoch, step)
            tg.backward(loss)
            opt.step()
            losses.append(val)
        if log:
            log(f"denoiser epoch {epoch}: loss {np.mean(losses[-30:]):.4f}")
    model.params.set_trainable(False)
    model.meta.update(epochs_run=hyper.epochs, final_loss=float(np.mean(losses[-30:])))
    return model


def denoiser_holdout_mse(model: Denoiser, ds: LabeledDataset, sched: NoiseSchedule,
                         seed: int, n: int = 256) -> float:
    """MSE between predicted and true noise on fresh noised pairs."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, ds.n, size=n)
    x0 = ds.images[idx]
    t = rng.integers(0, sched.t_steps, size=n)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_t = q_sample_batched(x0, t, eps, sched)
    total = 0.0
    for i in range(0, n, 64):
        pred = model.forward(Tensor(x_t[i:i + 64]), t[i:i + 64]).data
        total += float(np.sum(np.square(pred - eps[i:i + 64], dtype=np.float64)))
    return total / x0.size


def evaluate_accuracy(model: Classifier, ds: LabeledDataset) -> float:
    pred = model.predict(ds.images)
    return float((pred == ds.labels).mean())


def noisy_accuracy(model: Classifier, ds: LabeledDataset, sigma: float, seed: int) -> float:
    rng = np.random.default_rng(seed)
    noisy = np.clip(ds.images + sigma * rng.standard_normal(ds.images.shape), -3, 3)
    pred = model.predict(noisy.astype(np.float32))
    return float((pred == ds.labels).mean())


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_tensors(path, arrays: dict) -> None:
    """Write named float32 arrays to the binary container (little-endian).

    Layout: magic, version u32, count u32, then per entry: name length u32,
    utf-8 name, dtype code u8, rank u32, extents u32 each, absolute payload
    offset u64.  Raw row-major payloads follow the table.
    """
    names = list(arrays.keys())
    table = bytearray()
    header_size = len(CHECKPOINT_MAGIC) + 4 + 4
    entry_sizes = []
    for name in names:
        arr = arrays[name]
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 payloads are supported, got {arr.dtype}")
        nb = name.encode("utf-8")
        entry_sizes.append(4 + len(nb) + 1 + 4 + 4 * arr.ndim + 8)
    offset = header_size + sum(entry_sizes)
    for name in names:
        arr = arrays[name]
        nb = name.encode("utf-8")
        table += struct.pack("<I", len(nb)) + nb
        table += struct.pack("<BI", _DTYPE_F32, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", offset)
        offset += arr.nbytes
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(names))
    blob += table
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        blob += arr.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_code, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        if dtype_code != _DTYPE_F32:
            raise CheckpointError(f"{name}: unknown dtype code {dtype_code}")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, offset))
    out = {}
    for name, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        payload = buf[offset:offset + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(f"{name}: truncated payload")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out


def save_classifier(model: Classifier, path) -> None:
    save_tensors(path, model.params.arrays())
    meta = {"kind": "classifier", "variant": model.variant,
            "arch": asdict(model.arch), "meta": model.meta}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def save_denoiser(model: Denoiser, path) -> None:
    save_tensors(path, model.params.arrays())
    meta = {"kind": "denoiser", "arch": asdict(model.arch), "meta": model.meta}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path):
    """Load either model kind from container + sidecar metadata."""
    meta = json.loads(Path(str(path) + ".json").read_text())
    arrays = load_tensors(path)
    arch_d = dict(meta["arch"])
    if meta["kind"] == "classifier":
        arch_d["channels"] = tuple(arch_d["channels"])
        arch_d["strides"] = tuple(arch_d["strides"])
        arch_d["kernels"] = tuple(arch_d.get("kernels", (3,) * len(arch_d["channels"])))
        model = Classifier(ClassifierArch(**arch_d), ParamStore(arrays),
                           meta["variant"], meta.get("meta"))
    elif meta["kind"] == "denoiser":
        arch_d["widths"] = tuple(arch_d["widths"])
        model = Denoiser(DenoiserArch(**arch_d), ParamStore(arrays), meta.get("meta"))
    else:
        raise CheckpointError(f"unknown model kind {meta['kind']!r}")
    return model
