"""Cascaded detail/body saliency network.

Data flow for the full model::

    image -> backbone -> [F1 (stride 32), F2, F3, F4 (stride 4)]
    D2 = proj(F1);  D_{i+1} = MDAB(D_i, F_i), i = 2..4;  S_detail = head(D5)
    [D'1..D'4] = detail_encoder(image, S_detail, D5)
    B2 = proj(F1) + proj(D'1);  B_{i+1} = MBAB(B_i, F_i, D'_i);  S_body = head(B5)
    S = clamp(S_detail + S_body, 0, 1)

The ablation baselines replace MDAB/MBAB with plain additive fusion blocks,
drop the cascade entirely (direct prediction), or swap the order of the two
stages (body first).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

POOL_KERNELS = (1, 2, 4)


@dataclass(frozen=True)
class NetConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)  # strides 4, 8, 16, 32
    stem_width: int = 16
    blocks_per_stage: int = 1
    encoder_widths: tuple[int, ...] = (8, 16, 32, 64)
    flow: int = 64
    pool_kernels: tuple[int, ...] = POOL_KERNELS
    cascade: bool = True
    body_first: bool = False
    mdab: bool = True
    mbab: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for key in ("widths", "encoder_widths", "pool_kernels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def pool(x: torch.Tensor, k: int) -> torch.Tensor:
    if k == 1:
        return x
    return F.avg_pool2d(x, k, stride=k, ceil_mode=True)


def check_input_size(h: int, w: int) -> None:
    if h % 32 or w % 32 or h < 64 or w < 64:
        raise ValueError(f"input size {h}x{w} must be divisible by 32 and at least 64x64")


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"non-finite values entering {name}")


def conv_bn_relu(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def projection(cin: int, cout: int) -> nn.Sequential:
    # bias-free so that a zero stream projects to zero
    return nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.ReLU())


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


def _stage(cin: int, cout: int, n_blocks: int) -> nn.Sequential:
    blocks = [ResidualBlock(cin, cout, stride=2)]
    blocks += [ResidualBlock(cout, cout) for _ in range(n_blocks - 1)]
    return nn.Sequential(*blocks)


class Backbone(nn.Module):
    """Five-scale residual CNN; the stride-2 stem output is discarded.

    ``forward`` returns ``[F1, F2, F3, F4]`` ordered deepest first
    (strides 32, 16, 8, 4).
    """

    def __init__(self, cfg: NetConfig, in_channels: int = 3):
        super().__init__()
        self.stem = conv_bn_relu(in_channels, cfg.stem_width, stride=2)
        chans = (cfg.stem_width,) + tuple(cfg.widths)
        self.stages = nn.ModuleList(
            _stage(chans[i], chans[i + 1], cfg.blocks_per_stage) for i in range(4)
        )

    @property
    def channels(self) -> list[int]:
        return [stage[0].conv1.out_channels for stage in self.stages][::-1]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_input_size(*x.shape[-2:])
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[::-1]


class RepresentationSampler(nn.Module):
    """``ReLU(sum_k conv_k(stream_k))`` -- one 3x3 projection per input stream."""

    def __init__(self, channels: int, n_streams: int):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(n_streams))

    def forward(self, *streams: torch.Tensor) -> torch.Tensor:
        if len(streams) != len(self.convs):
            raise ValueError(f"sampler expects {len(self.convs)} streams, got {len(streams)}")
        return F.relu(sum(conv(s) for conv, s in zip(self.convs, streams)))


class AttentionUnit(nn.Module):
    """Local (1 x H x W) and global (C x 1 x 1) sigmoid gates from a sampled representation.

    The sampler may be shared between units; it is registered in each of them.
    """

    def __init__(self, channels: int, sampler: RepresentationSampler):
        super().__init__()
        self.sampler = sampler
        self.local_conv = nn.Conv2d(channels, 1, 3, padding=1)
        self.global_conv = nn.Conv2d(channels, channels, 1)

    def forward(self, primary: torch.Tensor, *aux: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        size = primary.shape[-2:]
        for a in aux:
            if a.shape[-2:] != size:
                raise ValueError(f"spatial mismatch: {tuple(size)} vs {tuple(a.shape[-2:])}")
        rep = self.sampler(primary, *aux)
        local = torch.sigmoid(self.local_conv(rep))
        glob = torch.sigmoid(self.global_conv(rep).mean(dim=(-2, -1), keepdim=True))
        return local, glob


def _attend(unit: AttentionUnit, target: torch.Tensor, primary: torch.Tensor, *aux: torch.Tensor):
    local, glob = unit(primary, *aux)
    return target * (local + glob), local


class MDAB(nn.Module):
    """Multi-scale detail attention block.

    ``D_next = fuse(D + sum_t up(pool_t(F) * att_t))`` where every scale's
    attention unit shares one representation sampler.
    """

    def __init__(self, feat_channels: int, channels: int, pool_kernels=POOL_KERNELS, index: int = 0):
        super().__init__()
        self.index = index
        self.pool_kernels = tuple(pool_kernels)
        self.feat_proj = projection(feat_channels, channels)
        self.sampler = RepresentationSampler(channels, 2)
        self.units = nn.ModuleList(AttentionUnit(channels, self.sampler) for _ in self.pool_kernels)
        self.fuse = conv_bn_relu(channels, channels)
        self.record_attention = False
        self.attention: list[torch.Tensor] = []

    def forward(self, flow: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        _check_finite(f"MDAB[{self.index}]", flow, feat)
        size = feat.shape[-2:]
        flow = upsample(flow, size)
        f = self.feat_proj(feat)
        acc = torch.zeros_like(flow)
        maps = []
        for k, unit in zip(self.pool_kernels, self.units):
            fk, dk = pool(f, k), pool(flow, k)
            att, local = _attend(unit, fk, dk, fk)
            acc = acc + upsample(att, size)
            maps.append(local)
        if self.record_attention:
            self.attention = [upsample(m, size).detach() for m in maps]
        return self.fuse(flow + acc)


class MBAB(nn.Module):
    """Multi-scale body attention block: six attention units, two shared samplers.

    ``B_next = fuse(B + sum_t up(pool_t(F) * Fatt_t + pool_t(D') * Datt_t))``.
    """

    def __init__(self, feat_channels: int, detail_channels: int, channels: int, pool_kernels=POOL_KERNELS, index: int = 0):
        super().__init__()
        self.index = index
        self.pool_kernels = tuple(pool_kernels)
        self.feat_proj = projection(feat_channels, channels)
        self.detail_proj = projection(detail_channels, channels)
        self.feat_sampler = RepresentationSampler(channels, 3)
        self.detail_sampler = RepresentationSampler(channels, 3)
        self.feat_units = nn.ModuleList(AttentionUnit(channels, self.feat_sampler) for _ in self.pool_kernels)
        self.detail_units = nn.ModuleList(AttentionUnit(channels, self.detail_sampler) for _ in self.pool_kernels)
        self.fuse = conv_bn_relu(channels, channels)
        self.record_attention = False
        self.attention: list[torch.Tensor] = []

    def forward(self, flow: torch.Tensor, feat: torch.Tensor, detail: torch.Tensor) -> torch.Tensor:
        _check_finite(f"MBAB[{self.index}]", flow, feat, detail)
        size = feat.shape[-2:]
        if detail.shape[-2:] != size:
            raise ValueError(f"MBAB[{self.index}]: detail feature {tuple(detail.shape[-2:])} vs feature {tuple(size)}")
        flow = upsample(flow, size)
        f = self.feat_proj(feat)
        d = self.detail_proj(detail)
        acc = torch.zeros_like(flow)
        maps = []
        for k, fu, du in zip(self.pool_kernels, self.feat_units, self.detail_units):
            bk, fk, dk = pool(flow, k), pool(f, k), pool(d, k)
            f_att, f_local = _attend(fu, fk, bk, fk, dk)
            d_att, d_local = _attend(du, dk, bk, fk, dk)
            acc = acc + upsample(f_att + d_att, size)
            maps += [f_local, d_local]
        if self.record_attention:
            self.attention = [upsample(m, size).detach() for m in maps]
        return self.fuse(flow + acc)


class PlainBlock(nn.Module):
    """Attention-free decoder block used by the ablation baselines: ``fuse(flow + sum proj(aux))``."""

    def __init__(self, aux_channels: tuple[int, ...], channels: int, index: int = 0):
        super().__init__()
        self.index = index
        self.projs = nn.ModuleList(projection(c, channels) for c in aux_channels)
        self.fuse = conv_bn_relu(channels, channels)

    def forward(self, flow: torch.Tensor, *aux: torch.Tensor) -> torch.Tensor:
        _check_finite(f"PlainBlock[{self.index}]", flow, *aux)
        size = aux[0].shape[-2:]
        flow = upsample(flow, size)
        return self.fuse(flow + sum(p(a) for p, a in zip(self.projs, aux)))


class SaliencyHead(nn.Module):
    """3x3 conv -> sigmoid -> bilinear upsample to the input size."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, flow: torch.Tensor, size) -> torch.Tensor:
        return upsample(torch.sigmoid(self.conv(flow)), size)


class DetailEncoder(nn.Module):
    """Light 4-stage encoder over ``concat(image, first-stage map)``.

    The last decoder flow is projected and added at the stride-4 stage.
    Returns four features, deepest first, at the backbone's strides.
    """

    def __init__(self, cfg: NetConfig, in_channels: int = 4):
        super().__init__()
        w = cfg.encoder_widths
        self.stem = conv_bn_relu(in_channels, w[0], stride=2)
        chans = (w[0],) + tuple(w)
        self.stages = nn.ModuleList(_stage(chans[i], chans[i + 1], 1) for i in range(4))
        self.flow_proj = nn.Conv2d(cfg.flow, w[0], 1, bias=False)

    @property
    def channels(self) -> list[int]:
        return [stage[0].conv1.out_channels for stage in self.stages][::-1]

    def forward(self, image: torch.Tensor, saliency: torch.Tensor, flow: torch.Tensor) -> list[torch.Tensor]:
        if saliency.shape[-2:] != image.shape[-2:]:
            raise ValueError("detail map must be at image resolution")
        x = self.stem(torch.cat([image, saliency], dim=1))
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == 0:
                if flow.shape[-2:] != x.shape[-2:]:
                    raise ValueError(f"flow {tuple(flow.shape[-2:])} does not match stride-4 stage {tuple(x.shape[-2:])}")
                x = x + self.flow_proj(flow)
            feats.append(x)
        return feats[::-1]


class _Decoder(nn.Module):
    """Three chained blocks over pyramid levels 2..4 starting from a projected deepest level."""

    def __init__(self, blocks: list[nn.Module], init_projs: list[nn.Module]):
        super().__init__()
        self.init = nn.ModuleList(init_projs)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, feats: list[torch.Tensor], aux: list[torch.Tensor] | None = None) -> torch.Tensor:
        streams = [feats] if aux is None else [feats, aux]
        flow = sum(p(s[0]) for p, s in zip(self.init, streams))
        for i, block in enumerate(self.blocks, start=1):
            flow = block(flow, *(s[i] for s in streams))
            expected = feats[i].shape[-2:]
            if flow.shape[-2:] != expected:
                raise RuntimeError(f"shape chain broken at block {i}: {tuple(flow.shape[-2:])} != {tuple(expected)}")
        return flow


def _first_decoder(cfg: NetConfig, feat_ch: list[int]) -> _Decoder:
    c = cfg.flow
    if cfg.mdab:
        blocks = [MDAB(feat_ch[i], c, cfg.pool_kernels, index=i) for i in (1, 2, 3)]
    else:
        blocks = [PlainBlock((feat_ch[i],), c, index=i) for i in (1, 2, 3)]
    return _Decoder(blocks, [projection(feat_ch[0], c)])


def _second_decoder(cfg: NetConfig, feat_ch: list[int], enc_ch: list[int]) -> _Decoder:
    c = cfg.flow
    if cfg.mbab:
        blocks = [MBAB(feat_ch[i], enc_ch[i], c, cfg.pool_kernels, index=i) for i in (1, 2, 3)]
    else:
        blocks = [PlainBlock((feat_ch[i], enc_ch[i]), c, index=i) for i in (1, 2, 3)]
    return _Decoder(blocks, [projection(feat_ch[0], c), projection(enc_ch[0], c)])


class CascadeNet(nn.Module):
    """Full model and its ablation variants, selected by :class:`NetConfig` toggles."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        if not cfg.cascade and (cfg.mdab or cfg.mbab or cfg.body_first):
            raise ValueError("attention blocks and stage order require cascade=True")
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        feat_ch = self.backbone.channels
        if not cfg.cascade:
            self.decoder = _Decoder(
                [PlainBlock((feat_ch[i],), cfg.flow, index=i) for i in (1, 2, 3)],
                [projection(feat_ch[0], cfg.flow)],
            )
            self.head = SaliencyHead(cfg.flow)
        else:
            self.first, self.second = ("body", "detail") if cfg.body_first else ("detail", "body")
            encoder = DetailEncoder(cfg)
            self.add_module(f"{self.first}_decoder", _first_decoder(cfg, feat_ch))
            self.add_module(f"{self.first}_head", SaliencyHead(cfg.flow))
            self.add_module(f"{self.first}_encoder", encoder)
            self.add_module(f"{self.second}_decoder", _second_decoder(cfg, feat_ch, encoder.channels))
            self.add_module(f"{self.second}_head", SaliencyHead(cfg.flow))
        init_weights(self)

    def attention_blocks(self) -> dict[str, nn.Module]:
        return {name: m for name, m in self.named_modules() if isinstance(m, (MDAB, MBAB))}

    def set_record_attention(self, on: bool) -> None:
        for m in self.attention_blocks().values():
            m.record_attention = on
            m.attention = []

    def forward(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        size = image.shape[-2:]
        check_input_size(*size)
        feats = self.backbone(image)
        if not self.cfg.cascade:
            fused = self.head(self.decoder(feats), size)
            return {"fused": fused}
        dec1 = getattr(self, f"{self.first}_decoder")
        dec2 = getattr(self, f"{self.second}_decoder")
        flow1 = dec1(feats)
        map1 = getattr(self, f"{self.first}_head")(flow1, size)
        enc = getattr(self, f"{self.first}_encoder")(image, map1, flow1)
        flow2 = dec2(feats, enc)
        map2 = getattr(self, f"{self.second}_head")(flow2, size)
        out = {self.first: map1, self.second: map2}
        out["fused"] = (out["detail"] + out["body"]).clamp(0.0, 1.0)
        return out


def init_weights(model: nn.Module) -> None:
    """Kaiming fan-in for convolutions; zero biases (including attention gates)."""
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
