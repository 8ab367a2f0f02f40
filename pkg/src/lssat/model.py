"""Transformer encoder/decoder/classifier over patch tokens.

Pre-norm ViT blocks, learned positional embeddings, no class token
(classification mean-pools the final tokens). The encoder runs two
streams off one parameter set: the full stream sees every token, the
masked stream sees only visible tokens with positional embeddings
gathered at the visible indices. The decoder re-inserts a learned mask
token at masked positions, adds its own positional embeddings, and maps
each output token back to patch pixels.

All forwards are autodiff Tensor compositions; run them inside a
ComputeGraph to train, outside to evaluate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .patches import ImageDims, MaskPlan, unpatchify_tokens

CHECKPOINT_MAGIC = b"LSSAT1\n"

INIT_STD = 0.02


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class BackbonePreset:
    """Encoder/decoder size descriptor along the small-to-large axis."""
    name: str
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float
    decoder_dim: int
    decoder_depth: int
    drop_path_rate: float

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ModelError(f"{self.name}: embed_dim {self.embed_dim} not "
                             f"divisible by heads {self.heads}")
        if self.depth < 0:
            raise ModelError(f"{self.name}: negative depth")


def _preset(name, d, depth, heads) -> BackbonePreset:
    # shallow decoder convention: two blocks at half the encoder width
    return BackbonePreset(name=name, embed_dim=d, depth=depth, heads=heads,
                          mlp_ratio=4.0, decoder_dim=d // 2, decoder_depth=2,
                          drop_path_rate=0.01)


# toy-* scale depth/width/heads along the same axis as the conventional
# base/large/huge dims recorded in vit-*; vit-* are trainable but sized
# far beyond what this package is meant to run.
PRESETS = {
    "toy-b": _preset("toy-b", 64, 4, 4),
    "toy-l": _preset("toy-l", 96, 8, 6),
    "toy-h": _preset("toy-h", 128, 12, 8),
    "vit-b": _preset("vit-b", 768, 12, 12),
    "vit-l": _preset("vit-l", 1024, 24, 16),
    "vit-h": _preset("vit-h", 1280, 32, 16),
}


def backbone_preset(name: str) -> BackbonePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ModelError(f"unknown backbone preset {name!r}; know "
                         f"{sorted(PRESETS)}") from None


def _trunc_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) with draws outside two sigma resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Model:
    """Encoder + decoder + classifier with a flat parameter dictionary."""

    def __init__(self, preset: BackbonePreset, image_size: int,
                 patch_size: int, num_classes: int, frames: int = 1,
                 channels: int = 3, seed: int = 0,
                 shared_encoder: bool = True):
        if image_size % patch_size:
            raise ModelError(f"image size {image_size} not divisible by "
                             f"patch {patch_size}")
        self.preset = preset
        self.image_size = image_size
        self.patch_size = patch_size
        self.num_classes = num_classes
        self.frames = frames
        self.channels = channels
        self.shared_encoder = shared_encoder
        grid = image_size // patch_size
        self.token_total = frames * grid * grid
        self.patch_dim = channels * patch_size * patch_size
        self.params: dict[str, ad.Tensor] = {}
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=(seed, 0xC0DE))))
        self._init_encoder("encoder", rng)
        if not shared_encoder:
            self._init_encoder("encoder2", rng)
        self._init_decoder(rng)
        d = preset.embed_dim
        self._add(rng, "head.w", (d, num_classes))
        self._zeros("head.b", (num_classes,))

    # -- parameter construction ------------------------------------------

    def _add(self, rng, name, shape):
        self.params[name] = ad.Tensor(_trunc_normal(rng, shape),
                                      requires_grad=True)

    def _zeros(self, name, shape):
        self.params[name] = ad.Tensor(np.zeros(shape), requires_grad=True)

    def _ones(self, name, shape):
        self.params[name] = ad.Tensor(np.ones(shape), requires_grad=True)

    def _init_block(self, rng, prefix, d, hidden):
        self._ones(f"{prefix}.ln1.scale", (d,))
        self._zeros(f"{prefix}.ln1.shift", (d,))
        for proj in ("wq", "wk", "wv", "wo"):
            self._add(rng, f"{prefix}.attn.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            self._zeros(f"{prefix}.attn.{bias}", (d,))
        self._ones(f"{prefix}.ln2.scale", (d,))
        self._zeros(f"{prefix}.ln2.shift", (d,))
        self._add(rng, f"{prefix}.mlp.w1", (d, hidden))
        self._zeros(f"{prefix}.mlp.b1", (hidden,))
        self._add(rng, f"{prefix}.mlp.w2", (hidden, d))
        self._zeros(f"{prefix}.mlp.b2", (d,))

    def _init_encoder(self, prefix, rng):
        p = self.preset
        d = p.embed_dim
        hidden = int(d * p.mlp_ratio)
        self._add(rng, f"{prefix}.patch_embed.w", (self.patch_dim, d))
        self._zeros(f"{prefix}.patch_embed.b", (d,))
        self._add(rng, f"{prefix}.pos_embed", (self.token_total, d))
        for i in range(p.depth):
            self._init_block(rng, f"{prefix}.blocks.{i}", d, hidden)
        self._ones(f"{prefix}.norm.scale", (d,))
        self._zeros(f"{prefix}.norm.shift", (d,))

    def _init_decoder(self, rng):
        p = self.preset
        dd = p.decoder_dim
        hidden = int(dd * p.mlp_ratio)
        self._add(rng, "decoder.embed.w", (p.embed_dim, dd))
        self._zeros("decoder.embed.b", (dd,))
        self._zeros("decoder.mask_token", (dd,))
        self._add(rng, "decoder.pos_embed", (self.token_total, dd))
        for i in range(p.decoder_depth):
            self._init_block(rng, f"decoder.blocks.{i}", dd, hidden)
        self._ones("decoder.norm.scale", (dd,))
        self._zeros("decoder.norm.shift", (dd,))
        self._add(rng, "decoder.head.w", (dd, self.patch_dim))
        self._zeros("decoder.head.b", (self.patch_dim,))

    # -- forward pieces ----------------------------------------------------

    def _p(self, name) -> ad.Tensor:
        return self.params[name]

    def _linear(self, x, prefix):
        return ad.add(ad.matmul(x, self._p(f"{prefix}.w")),
                      self._p(f"{prefix}.b"))

    def _attention(self, x, prefix, heads):
        b, s, d = x.shape
        dh = d // heads
        heads_view = []
        for proj, bias in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
            y = ad.add(ad.matmul(x, self._p(f"{prefix}.{proj}")),
                       self._p(f"{prefix}.{bias}"))
            y = ad.reshape(y, (b, s, heads, dh))
            heads_view.append(ad.transpose(y, (0, 2, 1, 3)))   # (B,h,S,dh)
        q, k, v = heads_view
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        attn = ad.softmax(ad.scalar_mul(scores, 1.0 / np.sqrt(dh)))
        mixed = ad.matmul(attn, v)                              # (B,h,S,dh)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, s, d))
        return ad.add(ad.matmul(mixed, self._p(f"{prefix}.wo")),
                      self._p(f"{prefix}.bo"))

    def _mlp(self, x, prefix):
        h = ad.gelu(ad.add(ad.matmul(x, self._p(f"{prefix}.w1")),
                           self._p(f"{prefix}.b1")))
        return ad.add(ad.matmul(h, self._p(f"{prefix}.w2")),
                      self._p(f"{prefix}.b2"))

    def _drop_path_mask(self, shape, rate, rng):
        """Per-sample stochastic-depth multiplier as a constant tensor."""
        b = shape[0]
        keep = (rng.random(b) >= rate) / (1.0 - rate)
        return ad.Tensor(np.broadcast_to(keep[:, None, None], shape).copy())

    def _block(self, x, prefix, heads, rate, rng):
        def residual(branch):
            if rng is not None and rate > 0.0:
                branch = ad.mul(branch, self._drop_path_mask(branch.shape,
                                                             rate, rng))
            return branch

        norm1 = ad.layer_norm(x, self._p(f"{prefix}.ln1.scale"),
                              self._p(f"{prefix}.ln1.shift"))
        x = ad.add(x, residual(self._attention(norm1, f"{prefix}.attn", heads)))
        norm2 = ad.layer_norm(x, self._p(f"{prefix}.ln2.scale"),
                              self._p(f"{prefix}.ln2.shift"))
        return ad.add(x, residual(self._mlp(norm2, f"{prefix}.mlp")))

    def encode(self, tokens, visible_idx=None, train: bool = False,
               rng=None, stream: str = "full") -> ad.Tensor:
        """Patch tokens (B, S or S', patch_dim) -> latents (B, *, D).

        The masked stream passes ``visible_idx`` (B, S') so positional
        embeddings are gathered at the kept positions. Drop path fires
        only when ``train`` and the preset's rate is positive; ``rng``
        then supplies the (caller-keyed) randomness.
        """
        prefix = "encoder"
        if stream == "masked" and not self.shared_encoder:
            prefix = "encoder2"
        tokens = ad.as_tensor(tokens)
        if tokens.ndim != 3 or tokens.shape[2] != self.patch_dim:
            raise ModelError(f"encode: tokens {tokens.shape} do not match "
                             f"patch_dim {self.patch_dim}")
        x = self._linear(tokens, f"{prefix}.patch_embed")
        pos = self._p(f"{prefix}.pos_embed")
        if visible_idx is None:
            if tokens.shape[1] != self.token_total:
                raise ModelError(f"encode: full stream expects "
                                 f"{self.token_total} tokens, got "
                                 f"{tokens.shape[1]}")
            x = ad.add(x, pos)
        else:
            visible_idx = np.asarray(visible_idx)
            if visible_idx.shape != tokens.shape[:2]:
                raise ModelError(f"encode: visible_idx {visible_idx.shape} vs "
                                 f"tokens {tokens.shape}")
            x = ad.add(x, ad.index_gather(pos, visible_idx))
        rate = self.preset.drop_path_rate if train else 0.0
        drop_rng = rng if train else None
        for i in range(self.preset.depth):
            x = self._block(x, f"{prefix}.blocks.{i}", self.preset.heads,
                            rate, drop_rng)
        return ad.layer_norm(x, self._p(f"{prefix}.norm.scale"),
                             self._p(f"{prefix}.norm.shift"))

    def decode_tokens(self, latent: ad.Tensor, plan: MaskPlan,
                      train: bool = False, rng=None) -> ad.Tensor:
        """Visible-stream latents -> full-length patch predictions (B, S, patch_dim)."""
        if plan.total != self.token_total:
            raise ModelError(f"decode: plan covers {plan.total} tokens, model "
                             f"has {self.token_total}")
        if latent.shape[1] != plan.visible_count:
            raise ModelError(f"decode: latent has {latent.shape[1]} tokens, "
                             f"plan keeps {plan.visible_count}")
        b = latent.shape[0]
        dd = self.preset.decoder_dim
        y = self._linear(latent, "decoder.embed")
        placed = ad.index_scatter(y, plan.visible, plan.total)
        if plan.masked_count:
            mask_tok = ad.add(ad.Tensor(np.zeros((b, plan.masked_count, dd))),
                              self._p("decoder.mask_token"))
            placed = ad.add(placed,
                            ad.index_scatter(mask_tok, plan.masked, plan.total))
        x = ad.add(placed, self._p("decoder.pos_embed"))
        rate = self.preset.drop_path_rate if train else 0.0
        drop_rng = rng if train else None
        for i in range(self.preset.decoder_depth):
            x = self._block(x, f"decoder.blocks.{i}", self.preset.heads,
                            rate, drop_rng)
        x = ad.layer_norm(x, self._p("decoder.norm.scale"),
                          self._p("decoder.norm.shift"))
        return self._linear(x, "decoder.head")

    def decode_reconstruct(self, latent: ad.Tensor, plan: MaskPlan,
                           train: bool = False, rng=None) -> ad.Tensor:
        """Full reconstruction as a (B, T, C, H, W) tensor."""
        tokens = self.decode_tokens(latent, plan, train=train, rng=rng)
        dims = ImageDims(b=tokens.shape[0], t=self.frames, c=self.channels,
                         h=self.image_size, w=self.image_size)
        return unpatchify_tokens(tokens, dims, self.patch_size)

    def classify(self, latent: ad.Tensor) -> ad.Tensor:
        """Mean-pool tokens, then map to class logits (B, num_classes)."""
        if latent.ndim != 3 or latent.shape[2] != self.preset.embed_dim:
            raise ModelError(f"classify: latent {latent.shape} does not match "
                             f"embed dim {self.preset.embed_dim}")
        return self._linear(ad.mean(latent, axis=1), "head")

    # -- checkpoints ---------------------------------------------------------

    def config_manifest(self) -> dict:
        return {"preset": self.preset.name, "preset_dims": asdict(self.preset),
                "image_size": self.image_size,
                "patch_size": self.patch_size, "num_classes": self.num_classes,
                "frames": self.frames, "channels": self.channels,
                "shared_encoder": self.shared_encoder}

    def save_checkpoint(self, path):
        names = sorted(self.params)
        manifest = dict(self.config_manifest())
        manifest["params"] = [{"name": n, "shape": list(self.params[n].shape)}
                              for n in names]
        blob = json.dumps(manifest, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(len(blob).to_bytes(8, "little"))
            f.write(blob)
            for n in names:
                f.write(self.params[n].array.tobytes())

    @classmethod
    def load_checkpoint(cls, path) -> "Model":
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise ModelError(f"{path}: not a checkpoint "
                             f"(bad magic {raw[:7]!r})")
        off = len(CHECKPOINT_MAGIC)
        blob_len = int.from_bytes(raw[off:off + 8], "little")
        off += 8
        manifest = json.loads(raw[off:off + blob_len])
        off += blob_len
        model = cls(preset=BackbonePreset(**manifest["preset_dims"]),
                    image_size=manifest["image_size"],
                    patch_size=manifest["patch_size"],
                    num_classes=manifest["num_classes"],
                    frames=manifest["frames"],
                    channels=manifest["channels"],
                    shared_encoder=manifest["shared_encoder"])
        for entry in manifest["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in model.params or model.params[name].shape != shape:
                raise ModelError(f"{path}: incompatible parameter {name} "
                                 f"{shape}")
            n_bytes = int(np.prod(shape)) * 8
            arr = np.frombuffer(raw, dtype=np.float64, count=int(np.prod(shape)),
                                offset=off).reshape(shape).copy()
            off += n_bytes
            model.params[name] = ad.Tensor(arr, requires_grad=True)
        if off != len(raw):
            raise ModelError(f"{path}: trailing bytes in checkpoint")
        return model
