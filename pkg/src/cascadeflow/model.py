"""Conditional velocity field over stage latents.

A compact convolutional residual network applied per frame, with one
depthwise temporal convolution for along-window mixing. Conditioning on
flow time, spatial-scale index, the latent's timescale index, the flow's
target-timescale index, and a pooled forcing summary enters through
feature-wise affine modulation; the forcing maps themselves are
concatenated as input channels, alongside fixed coordinate channels (the
network must be able to express position-locked response patterns) and
window-phase channels (it must be able to express the seasonal cycle).

Parameters live in one flat float64 vector with a named segment table, so
optimizer steps, gradient checks, and checkpoints all operate on plain
arrays. The final convolution is zero-initialized: a fresh model predicts
zero velocity everywhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ModelError
from .paths import ConditioningBundle
from .rng import stream

_COORD_CHANNELS = 3  # normalized latitude, sin(lon), cos(lon)
_PHASE_CHANNELS = 2  # sin/cos of within-window position


@dataclass(frozen=True)
class ModelConfig:
    data_channels: int = 2
    forcing_channels: int = 2
    width: int = 24
    blocks: int = 2
    embed_dim: int = 16
    embed_hidden: int = 64
    cond_dim: int = 160
    time_scale: float = 1000.0

    def __post_init__(self):
        if self.embed_dim % 2 != 0 or self.embed_dim < 2:
            raise ModelError(f"embed_dim must be even and >= 2, got {self.embed_dim}")
        for name in ("data_channels", "forcing_channels", "width", "blocks", "embed_hidden", "cond_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.data_channels + self.forcing_channels + _COORD_CHANNELS + _PHASE_CHANNELS


def _segment_specs(cfg: ModelConfig):
    """Ordered (name, shape, fan_in, zero_init) table."""
    f, cin, d = cfg.width, cfg.in_channels, cfg.cond_dim
    e, hm, cf = cfg.embed_dim, cfg.embed_hidden, cfg.forcing_channels
    specs = [
        ("stem.w", (f, cin, 3, 3), cin * 9, False),
        ("stem.b", (f,), 0, True),
    ]
    for i in range(cfg.blocks):
        specs += [
            (f"block{i}.conv1.w", (f, f, 3, 3), f * 9, False),
            (f"block{i}.conv1.b", (f,), 0, True),
            (f"block{i}.film.w", (d, 2 * f), d, False),
            (f"block{i}.film.b", (2 * f,), 0, True),
            (f"block{i}.conv2.w", (f, f, 3, 3), f * 9, False),
            (f"block{i}.conv2.b", (f,), 0, True),
        ]
    specs += [
        ("tconv.w", (f, 3), 3, False),
        ("tconv.b", (f,), 0, True),
        ("head.w", (cfg.data_channels, f, 3, 3), f * 9, False),
        ("head.b", (cfg.data_channels,), 0, True),
    ]
    for emb in ("t", "scale", "timescale", "target"):
        specs += [
            (f"embed.{emb}.w1", (e, hm), e, False),
            (f"embed.{emb}.b1", (hm,), 0, True),
            (f"embed.{emb}.w2", (hm, hm), hm, False),
            (f"embed.{emb}.b2", (hm,), 0, True),
        ]
    specs += [
        ("cond.w1", (4 * hm + cf, d), 4 * hm + cf, False),
        ("cond.b1", (d,), 0, True),
        ("cond.w2", (d, d), d, False),
        ("cond.b2", (d,), 0, True),
    ]
    return specs


class VelocityModel:
    """Trainable conditional velocity field with flat parameter storage."""

    def __init__(self, config: ModelConfig, seed: int = 0, zero_last: bool = True):
        self.config = config
        self._specs = _segment_specs(config)
        self.segments: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape, _, _ in self._specs:
            self.segments[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.n_params = offset
        self.params = np.zeros(self.n_params)
        self.init_params(seed, zero_last=zero_last)

    @property
    def data_channels(self) -> int:
        return self.config.data_channels

    # ---- parameters -------------------------------------------------------

    def init_params(self, seed: int, zero_last: bool = True) -> None:
        rng = stream(seed, "model-init")
        for name, shape, fan_in, zero in self._specs:
            seg = self.segment(name)
            if zero or (zero_last and name == "head.w"):
                seg[...] = 0.0
            else:
                seg[...] = rng.standard_normal(shape) / np.sqrt(max(fan_in, 1))

    def segment(self, name: str) -> np.ndarray:
        off, shape = self.segments[name]
        return self.params[off : off + int(np.prod(shape))].reshape(shape)

    def segment_slice(self, name: str) -> slice:
        off, shape = self.segments[name]
        return slice(off, off + int(np.prod(shape)))

    # ---- forward ----------------------------------------------------------

    def _input_features(self, x: np.ndarray, cond: ConditioningBundle) -> np.ndarray:
        """Channels-last (T, H, W, Cin) stack of latent, forcing, coords, phase."""
        c, t, h, w = x.shape
        if cond.forcing.shape[1:] != (t, h, w):
            raise ModelError(
                f"conditioning forcing shape {cond.forcing.shape} does not match latent {x.shape}"
            )
        cf = cond.forcing.shape[0]
        feats = np.empty((t, h, w, self.config.in_channels))
        feats[..., :c] = np.moveaxis(x, 0, -1)
        feats[..., c : c + cf] = np.moveaxis(cond.forcing, 0, -1)
        base = c + cf
        feats[..., base] = np.linspace(-1.0, 1.0, h)[None, :, None]
        lon_angle = 2.0 * np.pi * (np.arange(w) + 0.5) / w
        feats[..., base + 1] = np.sin(lon_angle)[None, None, :]
        feats[..., base + 2] = np.cos(lon_angle)[None, None, :]
        phase_angle = 2.0 * np.pi * cond.phase
        feats[..., base + 3] = np.sin(phase_angle)[:, None, None]
        feats[..., base + 4] = np.cos(phase_angle)[:, None, None]
        return feats

    def _cond_forward(self, cond: ConditioningBundle):
        cache = {}
        parts = []
        for emb, value in (
            ("t", cond.t * self.config.time_scale),
            ("scale", float(cond.stage)),
            ("timescale", float(cond.timescale)),
            ("target", float(cond.target_timescale)),
        ):
            enc = nn.sinusoidal_encoding(value, self.config.embed_dim)
            h1, c1 = nn.linear_forward(enc, self.segment(f"embed.{emb}.w1"), self.segment(f"embed.{emb}.b1"))
            a1, ca = nn.silu_forward(h1)
            out, c2 = nn.linear_forward(a1, self.segment(f"embed.{emb}.w2"), self.segment(f"embed.{emb}.b2"))
            cache[emb] = (c1, ca, c2)
            parts.append(out)
        pooled = cond.forcing.mean(axis=(1, 2, 3))
        cin = np.concatenate(parts + [pooled])
        h1, cl1 = nn.linear_forward(cin, self.segment("cond.w1"), self.segment("cond.b1"))
        a1, cs = nn.silu_forward(h1)
        vec, cl2 = nn.linear_forward(a1, self.segment("cond.w2"), self.segment("cond.b2"))
        cache["trunk"] = (cl1, cs, cl2)
        return vec, cache

    def forward(self, x: np.ndarray, cond: ConditioningBundle) -> np.ndarray:
        v, _ = self._forward_cached(x, cond, keep=False)
        return v

    def _forward_cached(self, x: np.ndarray, cond: ConditioningBundle, keep: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[0] != self.config.data_channels:
            raise ModelError(
                f"latent must be ({self.config.data_channels}, T, H, W), got shape {x.shape}"
            )
        feats = self._input_features(x, cond)  # (T, H, W, Cin)

        cache = {"shape": x.shape} if keep else None
        cond_vec, cond_cache = self._cond_forward(cond)
        h, stem_cache = nn.conv2d_forward(feats, self.segment("stem.w"), self.segment("stem.b"))
        blocks_cache = []
        for i in range(self.config.blocks):
            u1, c1 = nn.conv2d_forward(h, self.segment(f"block{i}.conv1.w"), self.segment(f"block{i}.conv1.b"))
            fparams, cfilm_lin = nn.linear_forward(
                cond_vec, self.segment(f"block{i}.film.w"), self.segment(f"block{i}.film.b")
            )
            scale, shift = np.split(fparams, 2)
            u2, cfm = nn.film_forward(u1, scale, shift)
            u3, cs = nn.silu_forward(u2)
            u4, c2 = nn.conv2d_forward(u3, self.segment(f"block{i}.conv2.w"), self.segment(f"block{i}.conv2.b"))
            h = h + u4
            tcache = None
            if i == 0:
                tc, tcache = nn.tconv_forward(h, self.segment("tconv.w"), self.segment("tconv.b"))
                h = h + tc
            blocks_cache.append((c1, cfilm_lin, cfm, cs, c2, tcache))
        v, head_cache = nn.conv2d_forward(h, self.segment("head.w"), self.segment("head.b"))
        out = np.moveaxis(v, -1, 0)  # back to (C, T, H, W)
        if keep:
            cache.update(
                cond_cache=cond_cache,
                stem=stem_cache,
                blocks=blocks_cache,
                head=head_cache,
            )
        return out, cache

    # ---- backward ---------------------------------------------------------

    def backward(self, x: np.ndarray, cond: ConditioningBundle, output_cotangent: np.ndarray) -> np.ndarray:
        """Gradient of <forward(x, cond), cotangent> w.r.t. the flat parameters."""
        _, cache = self._forward_cached(x, cond)
        return self._backward_cached(cache, output_cotangent)

    def _backward_cached(self, cache, output_cotangent: np.ndarray) -> np.ndarray:
        cot = np.asarray(output_cotangent, dtype=np.float64)
        if cot.shape != cache["shape"]:
            raise ModelError(f"cotangent shape {cot.shape} does not match output {cache['shape']}")
        grad = np.zeros(self.n_params)

        def add(name, g):
            grad[self.segment_slice(name)] += g.reshape(-1)

        gh, dw, db = nn.conv2d_backward(np.moveaxis(cot, 0, -1), cache["head"])
        add("head.w", dw)
        add("head.b", db)

        d_cond_vec = np.zeros(self.config.cond_dim)
        for i in range(self.config.blocks - 1, -1, -1):
            c1, cfilm_lin, cfm, cs, c2, tcache = cache["blocks"][i]
            if tcache is not None:
                gt, dw, db = nn.tconv_backward(gh, self.segment("tconv.w"), tcache)
                add("tconv.w", dw)
                add("tconv.b", db)
                gh = gh + gt
            gu4 = gh
            gu3, dw, db = nn.conv2d_backward(gu4, c2)
            add(f"block{i}.conv2.w", dw)
            add(f"block{i}.conv2.b", db)
            gu2 = nn.silu_backward(gu3, cs)
            gu1, dscale, dshift = nn.film_backward(gu2, cfm)
            gfp = np.concatenate([dscale, dshift])
            gcv, dw, db = nn.linear_backward(gfp, self.segment(f"block{i}.film.w"), cfilm_lin)
            add(f"block{i}.film.w", dw)
            add(f"block{i}.film.b", db)
            d_cond_vec += gcv
            gin, dw, db = nn.conv2d_backward(gu1, c1)
            add(f"block{i}.conv1.w", dw)
            add(f"block{i}.conv1.b", db)
            gh = gh + gin
        _, dw, db = nn.conv2d_backward(gh, cache["stem"])
        add("stem.w", dw)
        add("stem.b", db)

        self._cond_backward(d_cond_vec, cache["cond_cache"], add)
        return grad

    def _cond_backward(self, g_vec: np.ndarray, cond_cache, add) -> None:
        cl1, cs, cl2 = cond_cache["trunk"]
        ga1, dw, db = nn.linear_backward(g_vec, self.segment("cond.w2"), cl2)
        add("cond.w2", dw)
        add("cond.b2", db)
        gh1 = nn.silu_backward(ga1, cs)
        gcin, dw, db = nn.linear_backward(gh1, self.segment("cond.w1"), cl1)
        add("cond.w1", dw)
        add("cond.b1", db)
        hm = self.config.embed_hidden
        for j, emb in enumerate(("t", "scale", "timescale", "target")):
            c1, ca, c2 = cond_cache[emb]
            gout = gcin[j * hm : (j + 1) * hm]
            ga, dw, db = nn.linear_backward(gout, self.segment(f"embed.{emb}.w2"), c2)
            add(f"embed.{emb}.w2", dw)
            add(f"embed.{emb}.b2", db)
            gh = nn.silu_backward(ga, ca)
            _, dw, db = nn.linear_backward(gh, self.segment(f"embed.{emb}.w1"), c1)
            add(f"embed.{emb}.w1", dw)
            add(f"embed.{emb}.b1", db)
        # pooled-forcing slice of gcin conditions on data, not parameters

    # ---- embeddings -------------------------------------------------------

    def embed_scale_and_timescale(self, k: int, timescale_index: int, dim: int | None = None) -> np.ndarray:
        """Concatenated spatial-scale and timescale embedding vectors."""
        dim = self.config.embed_dim if dim is None else dim
        if dim != self.config.embed_dim:
            raise ModelError(
                f"model was built with embed_dim={self.config.embed_dim}, cannot embed at dim={dim}"
            )
        outs = []
        for emb, value in (("scale", float(k)), ("timescale", float(timescale_index))):
            enc = nn.sinusoidal_encoding(value, dim)
            h1, _ = nn.linear_forward(enc, self.segment(f"embed.{emb}.w1"), self.segment(f"embed.{emb}.b1"))
            a1, _ = nn.silu_forward(h1)
            out, _ = nn.linear_forward(a1, self.segment(f"embed.{emb}.w2"), self.segment(f"embed.{emb}.b2"))
            outs.append(out)
        return np.concatenate(outs)


# ---- checkpoints -----------------------------------------------------------

_CHECKPOINT_DESCRIPTOR = "model.json"
_CHECKPOINT_BLOB = "params.f32"


def save_checkpoint(model: VelocityModel, path) -> None:
    """Write a descriptor document plus a raw little-endian float32 blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    descriptor = {
        "format": 1,
        "architecture": asdict(model.config),
        "dtype": "<f4",
        "param_count": model.n_params,
        "segments": [
            {"name": name, "offset": off, "shape": list(shape)}
            for name, (off, shape) in model.segments.items()
        ],
    }
    text = json.dumps(descriptor, sort_keys=True, separators=(",", ":")) + "\n"
    (path / _CHECKPOINT_DESCRIPTOR).write_text(text)
    blob = model.params.astype("<f4").tobytes()
    (path / _CHECKPOINT_BLOB).write_bytes(blob)


def load_checkpoint(path) -> VelocityModel:
    path = Path(path)
    try:
        descriptor = json.loads((path / _CHECKPOINT_DESCRIPTOR).read_text())
    except FileNotFoundError as exc:
        raise ModelError(f"no checkpoint descriptor at {path}") from exc
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed checkpoint descriptor at {path}: {exc}") from exc
    config = ModelConfig(**descriptor["architecture"])
    model = VelocityModel(config, seed=0, zero_last=True)
    if descriptor.get("param_count") != model.n_params:
        raise ModelError(
            f"checkpoint declares {descriptor.get('param_count')} parameters, "
            f"architecture needs {model.n_params}"
        )
    raw = (path / _CHECKPOINT_BLOB).read_bytes()
    expected = model.n_params * 4
    if len(raw) != expected:
        raise ModelError(f"parameter blob is {len(raw)} bytes, expected {expected}")
    model.params[...] = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return model
