"""Compressed-state flow surrogate: encoders, gated latent dynamics, decoder.

The simulation state (nx, ny, 9) is encoded once into a latent grid at
1/2^down_blocks resolution; the boundary mask is encoded once into a
multiplicative and an additive gate of the latent's shape. Every latent
step applies the gates (g * b_mul + b_add, which keeps the geometry
pinned into the state) and then a stack of residual blocks; one latent
step stands in for `interval` solver steps. Decoding is fully
convolutional, so one parameter set serves any grid size whose dims are
divisible by the compression factor, and output patches can be decoded
from just their latent receptive field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    channel_slice,
    conv2d_raw,
    mul,
    no_grad,
    reshape,
    same_padding,
)
from .errors import InvalidInputError, NumericError, ShapeError
from .nn import ConvLayer, DownResidualBlock, Parameter, ResidualBlock, TransposeConvLayer


@dataclass
class ModelConfig:
    """Architecture knobs; latent channels are base_filters * 2^down_blocks."""

    down_blocks: int = 2
    base_filters: int = 16
    comp_blocks: int = 3
    input_channels: int = 9
    leak: float = 0.1

    def __post_init__(self):
        if self.down_blocks < 1 or self.base_filters < 1 or self.comp_blocks < 0:
            raise InvalidInputError(
                f"invalid model config: down_blocks={self.down_blocks}, "
                f"base_filters={self.base_filters}, comp_blocks={self.comp_blocks}"
            )

    @property
    def latent_channels(self) -> int:
        return self.base_filters * 2**self.down_blocks

    @property
    def compression(self) -> int:
        return 2**self.down_blocks

    def to_kv(self) -> dict[str, str]:
        return {
            "down_blocks": str(self.down_blocks),
            "base_filters": str(self.base_filters),
            "comp_blocks": str(self.comp_blocks),
            "input_channels": str(self.input_channels),
            "leak": repr(self.leak),
        }

    @staticmethod
    def from_kv(kv: dict[str, str]) -> "ModelConfig":
        return ModelConfig(
            down_blocks=int(kv["down_blocks"]),
            base_filters=int(kv["base_filters"]),
            comp_blocks=int(kv["comp_blocks"]),
            input_channels=int(kv["input_channels"]),
            leak=float(kv["leak"]),
        )


@dataclass
class BoundaryGates:
    b_mul: Tensor
    b_add: Tensor


def apply_boundary(g: Tensor, gates: BoundaryGates) -> Tensor:
    """Gate the latent state: g * b_mul + b_add, elementwise."""
    if g.data.shape != gates.b_mul.data.shape or g.data.shape != gates.b_add.data.shape:
        raise ShapeError(
            f"gate shapes {gates.b_mul.data.shape}/{gates.b_add.data.shape} "
            f"do not match latent {g.data.shape}"
        )
    return add(mul(g, gates.b_mul), gates.b_add)


@dataclass
class RolloutResult:
    frames: list[np.ndarray] | None  # decoded states, length steps + 1
    latents: list[np.ndarray]  # latent trajectory, length steps + 1


def _build_encoder(prefix: str, cin: int, cfg: ModelConfig, rng) -> list:
    """down_blocks x (down-res, res) then a closing res at latent width."""
    blocks = []
    c = cin
    for k in range(1, cfg.down_blocks + 1):
        cout = cfg.base_filters * 2**k
        blocks.append(DownResidualBlock(f"{prefix}.down{k}", c, cout, rng, cfg.leak))
        blocks.append(ResidualBlock(f"{prefix}.res{k}", cout, rng, cfg.leak))
        c = cout
    blocks.append(ResidualBlock(f"{prefix}.res_out", c, rng, cfg.leak))
    return blocks


class Surrogate:
    """The full model; parameters are built deterministically from a seed."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(seed))
        latent = config.latent_channels
        self.flow_encoder = _build_encoder("flow_enc", config.input_channels, config, rng)
        self.boundary_encoder = _build_encoder("bnd_enc", 1, config, rng)
        # One trunk, one doubled-width head, split channel-wise into the
        # multiplicative and additive gates.
        self.boundary_head = ConvLayer("bnd_head", 3, 3, latent, 2 * latent, rng=rng)
        self.dynamics = [
            ResidualBlock(f"dyn{i}", latent, rng, config.leak)
            for i in range(config.comp_blocks)
        ]
        decoder = []
        c = latent
        for k in range(1, config.down_blocks):
            decoder.append(("tconv", TransposeConvLayer(f"dec.up{k}", c, c // 2, rng)))
            decoder.append(("res", ResidualBlock(f"dec.res{k}a", c // 2, rng, config.leak)))
            decoder.append(("res", ResidualBlock(f"dec.res{k}b", c // 2, rng, config.leak)))
            c //= 2
        # Final upsampling maps straight to the 9 populations, linear output.
        decoder.append(("tconv", TransposeConvLayer("dec.out", c, config.input_channels, rng)))
        self.decoder = decoder

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in self.flow_encoder + self.boundary_encoder:
            params.extend(block.params())
        params.extend(self.boundary_head.params())
        for block in self.dynamics:
            params.extend(block.params())
        for _, layer in self.decoder:
            params.extend(layer.params())
        return params

    # --- shape plumbing -------------------------------------------------

    def _check_divisible(self, nx: int, ny: int) -> None:
        m = self.config.compression
        if nx % m or ny % m:
            raise ShapeError(
                f"grid dims ({nx}, {ny}) must be a multiple of {m} "
                f"(compression factor for down_blocks={self.config.down_blocks})"
            )

    @staticmethod
    def _as_batched(x, channels: int, what: str) -> tuple[Tensor, bool]:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        if t.data.ndim not in (3, 4):
            raise ShapeError(f"{what} must be rank 3 or 4, got shape {t.data.shape}")
        if t.data.shape[-1] != channels:
            raise ShapeError(
                f"{what} must have {channels} channels, got shape {t.data.shape}"
            )
        if t.data.ndim == 3:
            return reshape(t, (1,) + t.data.shape), True
        return t, False

    @staticmethod
    def _maybe_squeeze(t: Tensor, squeeze: bool) -> Tensor:
        return reshape(t, t.data.shape[1:]) if squeeze else t

    # --- model pieces -----------------------------------------------------

    def encode_flow(self, f) -> Tensor:
        """Compress a state (nx, ny, 9) [or batched] to the latent grid."""
        x, squeeze = self._as_batched(f, self.config.input_channels, "flow state")
        self._check_divisible(x.data.shape[1], x.data.shape[2])
        for block in self.flow_encoder:
            x = block(x)
        return self._maybe_squeeze(x, squeeze)

    def encode_boundary(self, b) -> BoundaryGates:
        """Compress a mask (nx, ny, 1) [or batched] into latent gates."""
        x, squeeze = self._as_batched(b, 1, "boundary mask")
        self._check_divisible(x.data.shape[1], x.data.shape[2])
        for block in self.boundary_encoder:
            x = block(x)
        x = self.boundary_head(x)
        latent = self.config.latent_channels
        b_mul = channel_slice(x, 0, latent)
        b_add = channel_slice(x, latent, 2 * latent)
        return BoundaryGates(
            b_mul=self._maybe_squeeze(b_mul, squeeze),
            b_add=self._maybe_squeeze(b_add, squeeze),
        )

    def compress_step(self, g: Tensor, gates: BoundaryGates) -> Tensor:
        """One latent transition: gate the state, then the residual stack."""
        x, squeeze = self._as_batched(g, self.config.latent_channels, "latent state")
        gm, _ = self._as_batched(gates.b_mul, self.config.latent_channels, "b_mul")
        ga, _ = self._as_batched(gates.b_add, self.config.latent_channels, "b_add")
        x = apply_boundary(x, BoundaryGates(gm, ga))
        for block in self.dynamics:
            x = block(x)
        return self._maybe_squeeze(x, squeeze)

    def decode(self, g) -> Tensor:
        """Expand a latent grid back to the full state (nx, ny, 9)."""
        x, squeeze = self._as_batched(g, self.config.latent_channels, "latent state")
        for _kind, layer in self.decoder:
            x = layer(x)
        return self._maybe_squeeze(x, squeeze)

    # --- rollout ------------------------------------------------------------

    def rollout(self, f0, mask_values, steps: int, decode_frames: bool = True) -> RolloutResult:
        """Iterate the latent dynamics from an encoded start state.

        Encoding happens once; gates are computed once from the (static)
        mask. Returns steps + 1 latents (and decoded frames when asked),
        index 0 being the encoded start itself.
        """
        with no_grad():
            g = self.encode_flow(np.asarray(f0))
            gates = self.encode_boundary(np.asarray(mask_values))
            latents = [g.data]
            frames = [self.decode(g).data] if decode_frames else None
            for t in range(1, steps + 1):
                try:
                    g = self.compress_step(g, gates)
                    if decode_frames:
                        frames.append(self.decode(g).data)
                except NumericError as exc:
                    err = NumericError(f"rollout diverged at latent step {t}: {exc}")
                    err.step = t
                    raise err from exc
                latents.append(g.data)
        return RolloutResult(frames=frames, latents=latents)

    # --- patch decoding -------------------------------------------------------

    def _decoder_ranges(self, latent_dims: tuple[int, int], region: tuple[int, int, int, int]):
        """Per-layer inclusive output ranges needed to produce `region`.

        Returns (lengths, ranges): lengths[i] is the full output grid size
        of decoder layer i per axis; ranges[i] the required slice of it.
        ranges[-1] equals the requested region.
        """
        lengths = []
        cur = list(latent_dims)
        for kind, _ in self.decoder:
            if kind == "tconv":
                cur = [2 * c for c in cur]
            lengths.append(tuple(cur))
        x0, y0, x1, y1 = region
        want = ((x0, x1 - 1), (y0, y1 - 1))
        ranges = [None] * len(self.decoder)
        for i in range(len(self.decoder) - 1, -1, -1):
            ranges[i] = want
            kind = self.decoder[i][0]
            in_len = latent_dims if i == 0 else lengths[i - 1]
            if kind == "tconv":
                want = tuple(
                    (max((w[0] - 1) // 2, 0), min((w[1] + 1) // 2, in_len[a] - 1))
                    for a, w in enumerate(want)
                )
            else:
                want = tuple(
                    (max(w[0] - 2, 0), min(w[1] + 2, in_len[a] - 1))
                    for a, w in enumerate(want)
                )
        return lengths, ranges, want  # `want` is now the latent slice needed

    def decode_patch(self, g, region: tuple[int, int, int, int], stats: dict | None = None) -> np.ndarray:
        """Decode only `region` = (x0, y0, x1, y1), half-open, output coords.

        Follows the same arithmetic path as decode restricted to the
        region's receptive field; intermediate slices scale with the
        region, not the grid. A full-grid region routes through decode
        itself. Pass a dict as `stats` to receive the materialized
        element count.
        """
        g_data = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g_data.ndim != 3 or g_data.shape[-1] != self.config.latent_channels:
            raise ShapeError(
                f"decode_patch expects an unbatched latent grid, got {g_data.shape}"
            )
        m = self.config.compression
        latent_dims = (g_data.shape[0], g_data.shape[1])
        out_dims = (latent_dims[0] * m, latent_dims[1] * m)
        x0, y0, x1, y1 = region
        if not (0 <= x0 < x1 <= out_dims[0] and 0 <= y0 < y1 <= out_dims[1]):
            raise ShapeError(
                f"region {region} outside decoded grid {out_dims} (half-open bounds)"
            )
        lengths, ranges, latent_need = self._decoder_ranges(latent_dims, region)
        if stats is not None:
            stats["elements"] = self._count_patch_elements(lengths, ranges, latent_need)
        if region == (0, 0, out_dims[0], out_dims[1]):
            with no_grad():
                return self.decode(g_data).data
        (lx, hx), (ly, hy) = latent_need
        x = g_data[None, lx : hx + 1, ly : hy + 1, :]
        offset = (lx, ly)
        for i, (kind, layer) in enumerate(self.decoder):
            in_len = latent_dims if i == 0 else lengths[i - 1]
            if kind == "tconv":
                x = _tconv_patch(x, offset, in_len, layer, ranges[i])
            else:
                x = _res_patch(x, offset, in_len, layer, ranges[i], self.config.leak)
            offset = (ranges[i][0][0], ranges[i][1][0])
        return x[0]

    def _count_patch_elements(self, lengths, ranges, latent_need) -> int:
        """Element count of every array the patch evaluation materializes."""

        def span(r):
            return (r[0][1] - r[0][0] + 1) * (r[1][1] - r[1][0] + 1)

        latent = self.config.latent_channels
        total = span(latent_need) * latent
        c = latent
        for i, (kind, layer) in enumerate(self.decoder):
            prev = latent_need if i == 0 else ranges[i - 1]
            if kind == "tconv":
                c = layer.kernel.data.shape[2]
                total += span(ranges[i]) * c
            else:
                mid = tuple(
                    (max(w[0] - 1, 0), min(w[1] + 1, lengths[i][a] - 1))
                    for a, w in enumerate(ranges[i])
                )
                # s(x), conv1 out, s(conv1), conv2 out, skip add
                total += span(prev) * c + 2 * span(mid) * c + 2 * span(ranges[i]) * c
        return total


def _conv_patch(x, offset, full_in, kernel, bias, stride, want):
    """SAME-conv outputs over `want` (inclusive, global coords).

    `x` covers rows/cols starting at `offset` of the full input whose per
    axis sizes are `full_in`; it must span the clamped receptive field of
    `want`. Zero padding is applied only where the receptive field passes
    the true tensor edges.
    """
    kh, kw = kernel.shape[0], kernel.shape[1]
    sl = [slice(None)]
    pads = []
    for axis, ksz in ((0, kh), (1, kw)):
        p0 = same_padding(full_in[axis], ksz, stride)[0]
        w0, w1 = want[axis]
        lo_u = w0 * stride - p0
        hi_u = w1 * stride - p0 + ksz - 1
        lo_c, hi_c = max(lo_u, 0), min(hi_u, full_in[axis] - 1)
        sl.append(slice(lo_c - offset[axis], hi_c - offset[axis] + 1))
        pads.append((lo_c - lo_u, hi_u - hi_c))
    xs = x[tuple(sl)]
    out = conv2d_raw(xs, kernel, stride, (pads[0][0], pads[0][1], pads[1][0], pads[1][1]))
    if bias is not None:
        out = out + bias
    return out


def _res_patch(x, offset, full, block, want, leak):
    """Residual block restricted to `want`, same conventions as _conv_patch."""

    def lrelu(a):
        return np.where(a >= 0, a, a * a.dtype.type(leak))

    mid_want = tuple(
        (max(w[0] - 1, 0), min(w[1] + 1, full[a] - 1)) for a, w in enumerate(want)
    )
    s1 = lrelu(x)
    c1 = _conv_patch(
        s1, offset, full, block.conv1.kernel.data, block.conv1.bias.data, 1, mid_want
    )
    s2 = lrelu(c1)
    mid_off = (mid_want[0][0], mid_want[1][0])
    c2 = _conv_patch(
        s2, mid_off, full, block.conv2.kernel.data, block.conv2.bias.data, 1, want
    )
    skip = x[
        :,
        want[0][0] - offset[0] : want[0][1] - offset[0] + 1,
        want[1][0] - offset[1] : want[1][1] - offset[1] + 1,
        :,
    ]
    return skip + c2


def _tconv_patch(y, offset, full_in, layer, want):
    """Stride-2 transpose conv outputs over `want` (inclusive, global coords).

    Output p draws from latent q with p = 2q - 1 + j, j in [0, 4); the
    kernel is scattered, accumulating only into rows/cols inside `want`.
    """
    k = layer.kernel.data  # (4, 4, cout, cin)
    cout = k.shape[2]
    n = y.shape[0]
    (w0x, w1x), (w0y, w1y) = want
    q0x = max((w0x - 1) // 2, 0)
    q1x = min((w1x + 1) // 2, full_in[0] - 1)
    q0y = max((w0y - 1) // 2, 0)
    q1y = min((w1y + 1) // 2, full_in[1] - 1)
    out = np.zeros((n, w1x - w0x + 1, w1y - w0y + 1, cout), dtype=y.dtype)
    for i in range(4):
        # valid q range for this kernel row: w0 <= 2q - 1 + i <= w1
        qx_lo = max(q0x, -((-(w0x + 1 - i)) // 2))  # ceil((w0+1-i)/2)
        qx_hi = min(q1x, (w1x + 1 - i) // 2)
        if qx_lo > qx_hi:
            continue
        for j in range(4):
            qy_lo = max(q0y, -((-(w0y + 1 - j)) // 2))
            qy_hi = min(q1y, (w1y + 1 - j) // 2)
            if qy_lo > qy_hi:
                continue
            src = y[
                :,
                qx_lo - offset[0] : qx_hi - offset[0] + 1,
                qy_lo - offset[1] : qy_hi - offset[1] + 1,
                :,
            ]
            contrib = np.tensordot(src, k[i, j], axes=([3], [1]))
            px = 2 * qx_lo - 1 + i - w0x
            py = 2 * qy_lo - 1 + j - w0y
            out[
                :,
                px : px + 2 * (qx_hi - qx_lo) + 1 : 2,
                py : py + 2 * (qy_hi - qy_lo) + 1 : 2,
                :,
            ] += contrib
    if layer.bias is not None:
        out = out + layer.bias.data
    return out
