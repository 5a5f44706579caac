#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Vanilla ViT encoder with a class token, classifier head and MAE decoder"""

from dataclasses import dataclass
import logging
import math

import numpy as np
from timm.models.vision_transformer import Block
import torch
from torch import nn

from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)

INIT_STD = 0.02


def patchify(images, patch_size):
    """Split images into flattened patches

    Patches are ordered row-major over the patch grid, each flattened as
    (row, column, channel).

    :param images: B x C x H x W tensor (or C x H x W)
    :param int patch_size: patch side in pixels
    :return: B x N x (patch_size**2 * C) tensor (or N x ...)
    """
    single = images.ndim == 3
    if single:
        images = images[None]
    b, c, height, width = images.shape
    if height % patch_size or width % patch_size:
        raise ShapeMismatchError(
            f"Image {height}x{width} is not divisible by patch size {patch_size}")
    h, w = height // patch_size, width // patch_size
    x = images.reshape(b, c, h, patch_size, w, patch_size)
    x = torch.einsum('nchpwq->nhwpqc', x)
    x = x.reshape(b, h * w, patch_size ** 2 * c)
    return x[0] if single else x


def unpatchify(patches, patch_size, channels=3, grid=None):
    """Inverse of patchify

    :param grid: (rows, cols) of the patch grid, square by default
    """
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b, n, length = patches.shape
    if length != patch_size ** 2 * channels:
        raise ShapeMismatchError(
            f"Patch length {length} doesn't match {patch_size}x{patch_size}x"
            f"{channels}")
    if grid is None:
        side = int(round(math.sqrt(n)))
        grid = (side, side)
    h, w = grid
    if h * w != n:
        raise ShapeMismatchError(f"{n} patches don't form a {h}x{w} grid")
    x = patches.reshape(b, h, w, patch_size, patch_size, channels)
    x = torch.einsum('nhwpqc->nchpwq', x)
    images = x.reshape(b, channels, h * patch_size, w * patch_size)
    return images[0] if single else images


@dataclass(frozen=True)
class MaskPattern:
    n_patches: int
    masked_indices: np.ndarray
    visible_indices: np.ndarray

    @property
    def masked_bool(self):
        mask = np.zeros(self.n_patches, dtype=bool)
        mask[self.masked_indices] = True
        return mask


def mask_count(n_patches, rho):
    # epsilon guards products like 0.29 * 100 = 28.999...
    return int(math.floor(rho * n_patches + 1e-9))


def sample_mask(n_patches, rho, seed):
    """Choose floor(rho * n_patches) patches to hide, uniformly

    :param seed: int or numpy Generator
    :rtype: MaskPattern
    """
    if not 0 < rho < 1:
        raise ValueError(f"Mask ratio must lie in (0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_patches)
    n_masked = mask_count(n_patches, rho)
    return MaskPattern(
        n_patches=n_patches,
        masked_indices=np.sort(order[:n_masked]),
        visible_indices=np.sort(order[n_masked:]),
    )


def sample_masks(batch_size, n_patches, rho, rng):
    """One MaskPattern per sample, stacked for the model

    :return: (visible index tensor B x n_visible, masked bool tensor B x N)
    """
    patterns = [sample_mask(n_patches, rho, rng) for _ in range(batch_size)]
    visible = torch.as_tensor(np.stack([p.visible_indices for p in patterns]),
                              dtype=torch.long)
    masked = torch.as_tensor(np.stack([p.masked_bool for p in patterns]))
    return visible, masked


def _gather_tokens(table, indices):
    """Rows of table (1 x N x D) selected per sample by indices (B x n)"""
    b = indices.shape[0]
    d = table.shape[-1]
    return torch.gather(table.expand(b, -1, -1), 1,
                        indices[..., None].expand(-1, -1, d))


class MaskedViT(nn.Module):
    """ViT encoder + classifier head, with a light decoder for pretraining

    Decoder parameter names start with ``decoder_`` (plus ``mask_token``) so
    the classifier part can be counted and audited separately.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        d = config.embed_dim
        dd = config.decoder_embed_dim
        n = config.n_patches

        self.patch_embed = nn.Linear(config.patch_len, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, d))
        self.blocks = nn.ModuleList([
            Block(d, config.heads, mlp_ratio=config.mlp_ratio, qkv_bias=True,
                  norm_layer=nn.LayerNorm)
            for _ in range(config.depth)])
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.class_count)

        self.decoder_embed = nn.Linear(d, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.decoder_pos_embed = nn.Parameter(torch.zeros(1, n, dd))
        self.decoder_blocks = nn.ModuleList([
            Block(dd, config.decoder_heads, mlp_ratio=config.mlp_ratio,
                  qkv_bias=True, norm_layer=nn.LayerNorm)
            for _ in range(config.decoder_depth)])
        self.decoder_norm = nn.LayerNorm(dd)
        self.decoder_pred = nn.Linear(dd, config.patch_len)

        self.initialize_weights()

    def initialize_weights(self):
        for p in (self.cls_token, self.pos_embed, self.decoder_pos_embed):
            nn.init.trunc_normal_(p, std=INIT_STD)
        nn.init.zeros_(self.mask_token)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    @staticmethod
    def is_decoder_param(name):
        return name.startswith('decoder_') or name == 'mask_token'

    def encode(self, patches, indices, with_cls=False):
        """Embed visible patches and run the encoder

        :param patches: B x n x patch_len visible patch rows (or n x ...)
        :param indices: B x n original patch indices of those rows
        :param bool with_cls: keep the class token as token 0
        :return: B x n x embed_dim tokens
        """
        single = patches.ndim == 2
        if single:
            patches, indices = patches[None], indices[None]
        indices = torch.as_tensor(indices, dtype=torch.long)
        x = self.patch_embed(patches)
        x = x + _gather_tokens(self.pos_embed[:, 1:], indices)
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        if not with_cls:
            x = x[:, 1:]
        return x[0] if single else x

    def decode(self, tokens, visible_indices):
        """Predict every patch from the visible tokens

        Mask tokens take the masked positions; the class token is not used.

        :param tokens: B x n_visible x embed_dim encoder output
        :param visible_indices: B x n_visible tensor, or a MaskPattern for
            a single unbatched sample
        :return: B x N x patch_len
        """
        single = tokens.ndim == 2
        if isinstance(visible_indices, MaskPattern):
            visible_indices = visible_indices.visible_indices[None]
        visible_indices = torch.as_tensor(visible_indices, dtype=torch.long)
        if single:
            tokens = tokens[None]
            if visible_indices.ndim == 1:
                visible_indices = visible_indices[None]
        if visible_indices.shape != tokens.shape[:2]:
            raise ShapeMismatchError(
                f"{tuple(tokens.shape[:2])} tokens vs "
                f"{tuple(visible_indices.shape)} indices")

        x = self.decoder_embed(tokens)
        b, _, dd = x.shape
        full = self.mask_token.expand(b, self.config.n_patches, dd)
        full = full.scatter(1, visible_indices[..., None].expand(-1, -1, dd), x)
        x = full + self.decoder_pos_embed
        for block in self.decoder_blocks:
            x = block(x)
        x = self.decoder_pred(self.decoder_norm(x))
        return x[0] if single else x

    def forward_mae(self, images, rho, rng):
        """Mask, encode, decode

        :return: (predicted patches, true patches, masked bool), all B x N ...
        """
        patches = patchify(images, self.config.patch_size)
        visible, masked = sample_masks(images.shape[0], self.config.n_patches,
                                       rho, rng)
        visible_patches = torch.gather(
            patches, 1, visible[..., None].expand(-1, -1, patches.shape[-1]))
        tokens = self.encode(visible_patches, visible)
        return self.decode(tokens, visible), patches, masked

    def classify(self, images):
        """Class logits for B x C x H x W images (or a single C x H x W)"""
        single = images.ndim == 3
        if single:
            images = images[None]
        patches = patchify(images, self.config.patch_size)
        indices = torch.arange(patches.shape[1]).expand(patches.shape[0], -1)
        tokens = self.encode(patches, indices, with_cls=True)
        logits = self.head(tokens[:, 0])
        return logits[0] if single else logits

    def forward(self, images):
        return self.classify(images)


def build_model(config, seed):
    """Freshly initialized MaskedViT, reproducible for a seed

    The global torch generator is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MaskedViT(config)
    logger.debug("Built %s (seed=%d)", config, seed)
    return model


def classifier_param_count(model):
    return sum(p.numel() for name, p in model.named_parameters()
               if not MaskedViT.is_decoder_param(name))


def count_params_flops(config):
    """Closed-form parameter and FLOP counts of the classifier

    Covers patch embedding, class token, positional embeddings, the encoder
    blocks, final norm and head. FLOPs are multiply-accumulates of the linear
    layers for one image.

    :rtype: tuple(int, int)
    """
    d = config.embed_dim
    hidden = int(d * config.mlp_ratio)
    n = config.n_patches
    p = config.patch_len
    c = config.class_count

    block = (2 * d                      # norm1
             + 3 * d * d + 3 * d        # qkv
             + d * d + d                # attention projection
             + 2 * d                    # norm2
             + d * hidden + hidden      # fc1
             + hidden * d + d)          # fc2
    params = ((p * d + d) + d + (n + 1) * d
              + config.depth * block
              + 2 * d
              + d * c + c)

    tokens = n + 1
    block_flops = tokens * (4 * d * d + 2 * d * hidden)
    flops = n * p * d + config.depth * block_flops + d * c
    return params, flops
