"""Model variants behind one protocol: preprocess, encode image, encode text.

`stub` is a small seeded ResidualEncoder that needs no downloads and gives
bit-reproducible tensors; it exists so every contract here can be exercised
hermetically. `RN50` / `RN50x64` adapt a pretrained open_clip residual
backbone when that package and its weights are reachable; loading them
raises ModelUnavailable otherwise and callers are expected to surface that
cleanly.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch
from PIL import Image

from .backbone import IMAGE_MEAN, IMAGE_STD, ResidualEncoder, VisualFeatures

VARIANTS = ("stub", "RN50", "RN50x64")

# Smallest residual backbone that still has attention pooling; runs at desk
# scale. The stub exists so everything stays testable without weights.
DEFAULT_VARIANT = "RN50"


class ModelUnavailable(RuntimeError):
    pass


def _resize(image: Image.Image, resolution: int, floor: int) -> Image.Image:
    w, h = image.size
    scale = resolution / max(w, h)
    nw = max(floor, round(w * scale))
    nh = max(floor, round(h * scale))
    return image.resize((nw, nh), Image.BICUBIC)


def pixels_to_tensor(arr: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> normalized (1, 3, H, W) float tensor."""
    x = arr.astype(np.float32) / 255.0
    x = (x - IMAGE_MEAN) / IMAGE_STD
    return torch.from_numpy(x.astype(np.float32)).permute(2, 0, 1)[None]


class StubModel:
    """Seeded encoder; same seed -> byte-identical outputs everywhere."""

    name = "stub"

    def __init__(self, seed: int = 0):
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.visual = ResidualEncoder()
        self.visual.eval()
        self.seed = seed
        self.embed_dim = self.visual.embed_dim
        self.stride = self.visual.stride

    def preprocess(self, image: Image.Image, resolution: int) -> torch.Tensor:
        image = _resize(image.convert("RGB"), resolution, self.stride)
        return pixels_to_tensor(np.asarray(image))

    @torch.no_grad()
    def encode_image_features(self, pixels: torch.Tensor) -> VisualFeatures:
        return self.visual(pixels)

    @torch.no_grad()
    def encode_image(self, pixels: torch.Tensor) -> np.ndarray:
        _, final = self.visual.trunk(pixels)
        return self.visual.embed_map(final).numpy().astype(np.float32)

    @torch.no_grad()
    def final_map(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.visual.trunk(pixels)[1]

    @torch.no_grad()
    def embed_map(self, fmap: torch.Tensor) -> np.ndarray:
        return self.visual.embed_map(fmap).numpy().astype(np.float32)

    def encode_texts(self, categories: list[str]) -> np.ndarray:
        """Deterministic unit vector per category string.

        There is no trained text tower in the stub; a hash-seeded direction
        keeps the full protocol runnable and reproducible.
        """
        rows = []
        for name in categories:
            digest = hashlib.sha256(name.encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.standard_normal(self.embed_dim)
            rows.append(v / np.linalg.norm(v))
        return np.stack(rows).astype(np.float32)


class OpenClipModel:
    """Adapter over an open_clip residual backbone with attention pooling."""

    def __init__(self, arch: str):
        try:
            import open_clip
        except ImportError as exc:
            raise ModelUnavailable(
                f"{arch} needs the open_clip package, which is not installed") from exc
        try:
            model, _, preprocess = open_clip.create_model_and_transforms(
                arch, pretrained="openai")
            self._tokenize = open_clip.get_tokenizer(arch)
        except Exception as exc:
            raise ModelUnavailable(f"could not load {arch} weights: {exc}") from exc
        if not hasattr(model.visual, "attnpool"):
            raise ModelUnavailable(
                f"{arch} has no attention pooling layer; only residual "
                "variants with one expose per-cell value embeddings")
        model.eval()
        self.name = arch
        self._model = model
        self._preprocess = preprocess
        pool = model.visual.attnpool
        self.embed_dim = pool.c_proj.out_features
        self.stride = 32
        self.mid_stride = 16

    def preprocess(self, image: Image.Image, resolution: int) -> torch.Tensor:
        image = _resize(image.convert("RGB"), resolution, self.stride)
        return pixels_to_tensor(np.asarray(image))

    def _trunk(self, pixels: torch.Tensor):
        v = self._model.visual
        x = v.act1(v.bn1(v.conv1(pixels)))
        x = v.act2(v.bn2(v.conv2(x)))
        x = v.act3(v.bn3(v.conv3(x)))
        x = v.avgpool(x)
        x = v.layer1(x)
        x = v.layer2(x)
        mid = v.layer3(x)
        final = v.layer4(mid)
        return mid[0], final[0]

    @torch.no_grad()
    def encode_image_features(self, pixels: torch.Tensor) -> VisualFeatures:
        mid, final = self._trunk(pixels)
        pool = self._model.visual.attnpool
        c, h, w = final.shape
        tokens = final.reshape(c, h * w).T
        tokens = torch.cat([tokens.mean(dim=0, keepdim=True), tokens])
        tokens = tokens + _resampled_positional(pool, h, w)
        patch = pool.c_proj(pool.v_proj(tokens[1:])).reshape(h, w, -1)
        emb = self.embed_map(final)
        return VisualFeatures(
            mid=mid.permute(1, 2, 0).numpy().astype(np.float32),
            patch=patch.numpy().astype(np.float32),
            image_embedding=emb,
            stride=self.stride, mid_stride=self.mid_stride)

    @torch.no_grad()
    def encode_image(self, pixels: torch.Tensor) -> np.ndarray:
        emb = self._model.encode_image(pixels)[0]
        emb = emb / emb.norm()
        return emb.numpy().astype(np.float32)

    @torch.no_grad()
    def final_map(self, pixels: torch.Tensor) -> torch.Tensor:
        return self._trunk(pixels)[1]

    @torch.no_grad()
    def embed_map(self, fmap: torch.Tensor) -> np.ndarray:
        pool = self._model.visual.attnpool
        c, h, w = fmap.shape
        tokens = fmap.reshape(c, h * w).T
        tokens = torch.cat([tokens.mean(dim=0, keepdim=True), tokens])
        tokens = tokens + _resampled_positional(pool, h, w)
        import torch.nn.functional as F
        n = tokens.shape[0]
        heads = pool.num_heads
        out, _ = F.multi_head_attention_forward(
            query=tokens[:1, None], key=tokens[:, None], value=tokens[:, None],
            embed_dim_to_check=c, num_heads=heads,
            q_proj_weight=pool.q_proj.weight, k_proj_weight=pool.k_proj.weight,
            v_proj_weight=pool.v_proj.weight, in_proj_weight=None,
            in_proj_bias=torch.cat([pool.q_proj.bias, pool.k_proj.bias, pool.v_proj.bias]),
            bias_k=None, bias_v=None, add_zero_attn=False, dropout_p=0.0,
            out_proj_weight=pool.c_proj.weight, out_proj_bias=pool.c_proj.bias,
            use_separate_proj_weight=True, training=False, need_weights=False)
        emb = out[0, 0]
        emb = emb / emb.norm()
        return emb.numpy().astype(np.float32)

    @torch.no_grad()
    def encode_texts(self, categories: list[str]) -> np.ndarray:
        tokens = self._tokenize(categories)
        emb = self._model.encode_text(tokens)
        emb = emb / emb.norm(dim=-1, keepdim=True)
        return emb.numpy().astype(np.float32)


def _resampled_positional(pool, h: int, w: int) -> torch.Tensor:
    import torch.nn.functional as F
    table = pool.positional_embedding
    grid = int((table.shape[0] - 1) ** 0.5)
    if h == grid and w == grid:
        return table
    body = table[1:].reshape(grid, grid, -1).permute(2, 0, 1)
    body = F.interpolate(body[None], size=(h, w), mode="bilinear",
                         align_corners=False)[0]
    body = body.permute(1, 2, 0).reshape(h * w, -1)
    return torch.cat([table[:1], body])


def load_variant(name: str, seed: int = 0):
    if name == "stub":
        return StubModel(seed)
    if name in ("RN50", "RN50x64"):
        return OpenClipModel(name)
    raise ValueError(f"unknown model variant {name!r}; choose from {VARIANTS}")
