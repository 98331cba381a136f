"""Actor and critic function approximators with hand-rolled exact gradients.

The image trunk prepends two normalized coordinate channels to the three
downsampled silhouettes, runs two stride-2 convolutions, and flattens into a
fully connected stack.  Scalar features (normalized step, padded corner
lists, and for the critic the action) join at the first dense layer.  No
autodiff framework: each layer implements its own forward/backward pair, and
gradients are checked against finite differences in the test suite.

Forward and backward are pure given (parameters, inputs); training owns the
single mutable copy of the parameters.
"""

from __future__ import annotations

import struct
import weakref
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import CutAction, ParseState

CHECKPOINT_MAGIC = b"SPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_resolution: tuple[int, int] = (32, 32)
    conv_channels: tuple[int, int] = (8, 16)
    mlp_widths: tuple[int, int] = (256, 128)
    action_dim: int = 5
    max_corners: int = 32
    max_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.input_resolution) < 4:
            raise ValueError("input resolution too small")
        if min(self.conv_channels) < 1 or min(self.mlp_widths) < 1:
            raise ValueError("layer widths must be >= 1")

    @property
    def corner_feature_dim(self) -> int:
        return 3 * self.max_corners * 2

    @property
    def feature_dim(self) -> int:
        # normalized step index plus the flattened corner lists
        return 1 + self.corner_feature_dim


def miniature_config(seed: int = 0) -> NetConfig:
    """Tiny net for gradient checking."""
    return NetConfig(
        input_resolution=(8, 8),
        conv_channels=(4, 4),
        mlp_widths=(16, 8),
        max_corners=4,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# state encoding

_resize_cache: dict[tuple[int, int], np.ndarray] = {}


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging n_in cells into n_out, each output
    cell covering an equal span of the input."""
    key = (n_in, n_out)
    w = _resize_cache.get(key)
    if w is None:
        w = np.zeros((n_out, n_in))
        span = n_in / n_out
        for i in range(n_out):
            lo, hi = i * span, (i + 1) * span
            for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                w[i, j] = min(hi, j + 1) - max(lo, j)
        w /= span
        _resize_cache[key] = w
    return w


def resize_area(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Area-weighted resize of a 2-D array (exact box average when the
    ratios are integral)."""
    r = _area_weights(img.shape[0], shape[0])
    c = _area_weights(img.shape[1], shape[1])
    return r @ img.astype(np.float64) @ c.T


def coord_channels(shape: tuple[int, int]) -> np.ndarray:
    """Two channels holding each pixel's normalized row/col in [-1, 1]."""
    h, w = shape
    rows = np.linspace(-1.0, 1.0, h)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.linspace(-1.0, 1.0, w)[None, :]
    return np.stack([rows, cols])


def encode_state(state: ParseState, cfg: NetConfig, zero_projections: bool = False):
    """(image stack, feature vector) for one observation.

    Image channels: 3 area-downsampled silhouettes plus the two coordinate
    channels.  Features: step_index / max_steps, then the corner lists with
    their (-1, -1) padding kept as is.
    """
    h, w = cfg.input_resolution
    chans = []
    for img in state.projections:
        if zero_projections:
            chans.append(np.zeros((h, w)))
        else:
            chans.append(resize_area(img.pixels, (h, w)))
    image = np.concatenate([np.stack(chans), coord_channels((h, w))])
    corners = [np.asarray(cl, dtype=np.float64).reshape(-1) for cl in state.corner_lists]
    for cl in corners:
        if cl.shape[0] != cfg.corner_feature_dim // 3:
            raise ValueError("corner list length does not match the net's max_corners")
    feats = np.concatenate([[state.step_index / cfg.max_steps], *corners])
    return image, feats


_encode_caches: dict[tuple, "weakref.WeakKeyDictionary"] = {}


def encode_batch(states, cfg: NetConfig, zero_projections: bool = False, dtype=np.float32):
    """Batched :func:`encode_state` with a per-config weak cache, since replay
    sampling revisits the same observations many times."""
    cache_key = (id(cfg), bool(zero_projections), np.dtype(dtype).str)
    cache = _encode_caches.get(cache_key)
    if cache is None:
        cache = weakref.WeakKeyDictionary()
        _encode_caches[cache_key] = cache
    images, feats = [], []
    for s in states:
        pair = cache.get(s)
        if pair is None:
            im, ft = encode_state(s, cfg, zero_projections=zero_projections)
            pair = (im.astype(dtype), ft.astype(dtype))
            try:
                cache[s] = pair
            except TypeError:
                pass
        images.append(pair[0])
        feats.append(pair[1])
    return np.stack(images), np.stack(feats)


# ---------------------------------------------------------------------------
# layers


class _Layer:
    name = "layer"

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []


def _check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite activation after {name}")
    return x


class Conv2d(_Layer):
    """3x3 convolution, stride 2, zero padding 1, via im2col."""

    def __init__(self, name, cin, cout, rng, dtype):
        self.name = name
        self.cin, self.cout = cin, cout
        bound = 1.0 / np.sqrt(cin * 9)
        self.w = rng.uniform(-bound, bound, size=(cout, cin * 9)).astype(dtype)
        self.b = rng.uniform(-bound, bound, size=cout).astype(dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def _cols(self, x):
        b, c, h, w = x.shape
        hp = (h + 1) // 2
        wp = (w + 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((b, c, 9, hp, wp), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                cols[:, :, dy * 3 + dx] = xp[:, :, dy : dy + 2 * hp : 2, dx : dx + 2 * wp : 2]
        return cols.reshape(b, c * 9, hp * wp), (hp, wp)

    def forward(self, x):
        self.x_shape = x.shape
        cols, (hp, wp) = self._cols(x)
        self.cols = cols
        out = np.einsum("oc,bcp->bop", self.w, cols, optimize=True) + self.b[None, :, None]
        return _check_finite(self.name, out.reshape(x.shape[0], self.cout, hp, wp))

    def backward(self, dout):
        b, _, hp, wp = dout.shape
        dflat = dout.reshape(b, self.cout, hp * wp)
        self.dw[...] = np.einsum("bop,bcp->oc", dflat, self.cols, optimize=True)
        self.db[...] = dflat.sum(axis=(0, 2))
        dcols = np.einsum("oc,bop->bcp", self.w, dflat, optimize=True)
        _, c, h, w = self.x_shape
        dxp = np.zeros((b, c, h + 2, w + 2), dtype=dout.dtype)
        dcols = dcols.reshape(b, c, 9, hp, wp)
        for dy in range(3):
            for dx in range(3):
                dxp[:, :, dy : dy + 2 * hp : 2, dx : dx + 2 * wp : 2] += dcols[:, :, dy * 3 + dx]
        return dxp[:, :, 1 : 1 + h, 1 : 1 + w]


class Dense(_Layer):
    def __init__(self, name, nin, nout, rng, dtype):
        self.name = name
        bound = 1.0 / np.sqrt(nin)
        self.w = rng.uniform(-bound, bound, size=(nout, nin)).astype(dtype)
        self.b = rng.uniform(-bound, bound, size=nout).astype(dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x):
        self.x = x
        return _check_finite(self.name, x @ self.w.T + self.b)

    def backward(self, dout):
        self.dw[...] = dout.T @ self.x
        self.db[...] = dout.sum(axis=0)
        return dout @ self.w


class Relu(_Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, dout):
        return dout * self.mask


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# networks


class _TrunkNet:
    """Shared structure: conv trunk on the image stack, then dense layers on
    [flattened trunk, extra features].  Subclasses set the head behavior."""

    #: number of image channels: 3 silhouettes + 2 coordinate channels
    IMAGE_CHANNELS = 5

    def __init__(self, cfg: NetConfig, extra_dim: int, out_dim: int, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        c1, c2 = cfg.conv_channels
        h, w = cfg.input_resolution
        self.conv1 = Conv2d("conv1", self.IMAGE_CHANNELS, c1, rng, dtype)
        self.relu1 = Relu("relu1")
        self.conv2 = Conv2d("conv2", c1, c2, rng, dtype)
        self.relu2 = Relu("relu2")
        hp, wp = (h + 1) // 2, (w + 1) // 2
        hq, wq = (hp + 1) // 2, (wp + 1) // 2
        self.flat_dim = c2 * hq * wq
        m1, m2 = cfg.mlp_widths
        self.fc1 = Dense("fc1", self.flat_dim + extra_dim, m1, rng, dtype)
        self.relu3 = Relu("relu3")
        self.fc2 = Dense("fc2", m1, m2, rng, dtype)
        self.relu4 = Relu("relu4")
        self.head = Dense("head", m2, out_dim, rng, dtype)
        self.layers = [self.conv1, self.conv2, self.fc1, self.fc2, self.head]

    # -- flat parameter vector -------------------------------------------

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for l in self.layers for p in l.params()])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=self.dtype)
        pos = 0
        for layer in self.layers:
            for p in layer.params():
                n = p.size
                p[...] = flat[pos : pos + n].reshape(p.shape)
                pos += n
        if pos != flat.size:
            raise ValueError(f"parameter vector length {flat.size}, expected {pos}")

    def get_grads(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for l in self.layers for g in l.grads()])

    def param_count(self) -> int:
        return sum(p.size for l in self.layers for p in l.params())

    def param_slices(self) -> dict[str, slice]:
        out = {}
        pos = 0
        for layer in self.layers:
            for tag, p in zip(("w", "b"), layer.params()):
                out[f"{layer.name}.{tag}"] = slice(pos, pos + p.size)
                pos += p.size
        return out

    # -- forward/backward --------------------------------------------------

    def _trunk_forward(self, images, extra):
        x = self.relu1.forward(self.conv1.forward(images.astype(self.dtype)))
        x = self.relu2.forward(self.conv2.forward(x))
        self._conv_out_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        z = np.concatenate([flat, extra.astype(self.dtype)], axis=1)
        h = self.relu3.forward(self.fc1.forward(z))
        h = self.relu4.forward(self.fc2.forward(h))
        return self.head.forward(h)

    def _trunk_backward(self, dout):
        dh = self.head.backward(dout)
        dh = self.fc2.backward(self.relu4.backward(dh))
        dz = self.fc1.backward(self.relu3.backward(dh))
        dflat = dz[:, : self.flat_dim]
        dextra = dz[:, self.flat_dim :]
        dx = dflat.reshape(self._conv_out_shape)
        dx = self.conv2.backward(self.relu2.backward(dx))
        self.conv1.backward(self.relu1.backward(dx))
        return dextra


class ActorNet(_TrunkNet):
    """Deterministic policy: state -> action in [0, 1]^5."""

    def __init__(self, cfg: NetConfig, dtype=np.float32):
        super().__init__(cfg, extra_dim=cfg.feature_dim, out_dim=cfg.action_dim, dtype=dtype)

    def forward(self, images, feats):
        self._logits = self._trunk_forward(images, feats)
        self._out = sigmoid(self._logits)
        return self._out

    def backward(self, dout):
        """Gradient of the parameters given d(loss)/d(action); returns the
        flat parameter gradient."""
        dlogits = dout * self._out * (1.0 - self._out)
        self._trunk_backward(dlogits.astype(self.dtype))
        return self.get_grads()

    def act(self, state: ParseState, zero_projections: bool = False) -> CutAction:
        images, feats = encode_batch([state], self.cfg, zero_projections=zero_projections, dtype=self.dtype)
        out = self.forward(images, feats)[0]
        return CutAction.from_array(out)


class CriticNet(_TrunkNet):
    """Action-value estimate: (state, action) -> scalar."""

    def __init__(self, cfg: NetConfig, dtype=np.float32):
        super().__init__(cfg, extra_dim=cfg.feature_dim + cfg.action_dim, out_dim=1, dtype=dtype)
        self._fdim = cfg.feature_dim

    def forward(self, images, feats, actions):
        extra = np.concatenate([feats, actions], axis=1)
        return self._trunk_forward(images, extra)[:, 0]

    def backward(self, dout):
        """Gradients given d(loss)/dQ per sample; returns (flat parameter
        gradient, d(loss)/d(action))."""
        dextra = self._trunk_backward(np.asarray(dout, dtype=self.dtype)[:, None])
        daction = dextra[:, self._fdim :]
        return self.get_grads(), daction


def clone_params(src: _TrunkNet, dst: _TrunkNet) -> None:
    dst.set_params(src.get_params())


# ---------------------------------------------------------------------------
# checkpoints


def _pack_config(cfg: NetConfig) -> bytes:
    return struct.pack(
        "<10I",
        cfg.input_resolution[0],
        cfg.input_resolution[1],
        cfg.conv_channels[0],
        cfg.conv_channels[1],
        cfg.mlp_widths[0],
        cfg.mlp_widths[1],
        cfg.action_dim,
        cfg.max_corners,
        cfg.max_steps,
        cfg.seed,
    )


def _unpack_config(buf: bytes, pos: int) -> tuple[NetConfig, int]:
    vals = struct.unpack_from("<10I", buf, pos)
    cfg = NetConfig(
        input_resolution=(vals[0], vals[1]),
        conv_channels=(vals[2], vals[3]),
        mlp_widths=(vals[4], vals[5]),
        action_dim=vals[6],
        max_corners=vals[7],
        max_steps=vals[8],
        seed=vals[9],
    )
    return cfg, pos + 40


def save_checkpoint(path, cfg: NetConfig, actor: ActorNet, critic: CriticNet) -> None:
    """Versioned header, net shape, then actor and critic parameters as
    little-endian 32-bit floats."""
    ap = actor.get_params().astype("<f4")
    cp = critic.get_params().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(_pack_config(cfg))
        fh.write(struct.pack("<QQ", ap.size, cp.size))
        fh.write(ap.tobytes())
        fh.write(cp.tobytes())


def load_checkpoint(path) -> tuple[NetConfig, ActorNet, CriticNet]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg, pos = _unpack_config(buf, 8)
    na, nc = struct.unpack_from("<QQ", buf, pos)
    pos += 16
    actor = ActorNet(cfg)
    critic = CriticNet(cfg)
    ap = np.frombuffer(buf, dtype="<f4", count=na, offset=pos)
    pos += 4 * na
    cp = np.frombuffer(buf, dtype="<f4", count=nc, offset=pos)
    if na != actor.param_count() or nc != critic.param_count():
        raise ValueError(f"{path}: parameter payload does not match the stored config")
    actor.set_params(ap)
    critic.set_params(cp)
    return cfg, actor, critic
