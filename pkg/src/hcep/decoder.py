"""Hierarchical mask decoder.

Parent queries are decoded against the image embedding first; their mask
logits are re-encoded into tokens and injected into the image embedding
(parent-specific feature enhancement) before child queries are decoded.
One confidence token rides alongside every mask query through the same
segmentation head and predicts that mask's Dice score.

Mask logits come out at 4x the encoder grid per axis (two 2x2
upsamplings). Query rows follow the hierarchy's ascending-id level
ordering, so the node <-> logit-channel assignment is stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError, ShapeMismatchError
from .hierarchy import ConceptHierarchy
from .nets import (
    ImageEmbedding,
    ImageEncoder,
    NetConfig,
    PixelDecoder,
    attention,
    mlp_head,
)


@dataclass
class DecoderOutput:
    """Per-level mask logits and per-mask confidence predictions."""

    parent_logits: torch.Tensor  # (B, n_P, 4G, 4G)
    child_logits: torch.Tensor  # (B, n_C, 4G, 4G)
    parent_conf: torch.Tensor  # (B, n_P) in (0, 1)
    child_conf: torch.Tensor  # (B, n_C) in (0, 1)


class QueryBank(nn.Module):
    """Learnable parent/child query rows plus one confidence token per mask.

    Row order mirrors the hierarchy's ascending-id ordering per level, so
    slot assignment is reproducible given the same hierarchy file.
    """

    def __init__(self, hierarchy: ConceptHierarchy, dim: int, parent_level: int = 0):
        super().__init__()
        self.parent_ids = hierarchy.level_ids(parent_level)
        self.child_ids = hierarchy.level_ids(parent_level + 1)
        self.n_parent = len(self.parent_ids)
        self.n_child = len(self.child_ids)
        # unit-scale init keeps per-query identity visible through the
        # residual attention updates (tiny init collapses the mask channels)
        self.parent_queries = nn.Parameter(torch.randn(self.n_parent, dim))
        self.child_queries = nn.Parameter(torch.randn(self.n_child, dim))
        self.conf_tokens = nn.Parameter(torch.randn(self.n_parent + self.n_child, dim))
        self.slot_map = {
            "parent": {nid: i for i, nid in enumerate(self.parent_ids)},
            "child": {nid: i for i, nid in enumerate(self.child_ids)},
        }


class SegmentationHead(nn.Module):
    """Self-attention on the query stream, then bidirectional cross
    attention with the token stream (token update first, query update
    second, both residual). Positional encoding enters on the token side
    only. Attention is projection-free; parameters live in the queries and
    the downstream MLPs."""

    def __init__(self, heads: int = 1):
        super().__init__()
        self.heads = heads

    def forward(self, tokens, queries, pos):
        # tokens (B, n_t, d), queries (B, n_q, d), pos (n_t, d)
        queries = attention(queries, queries, queries, heads=self.heads)
        tokens = attention(tokens, queries, queries, pos_q=pos, heads=self.heads)
        queries = attention(queries, tokens, tokens, pos_k=pos, heads=self.heads)
        return tokens, queries


def mask_statistics(mask_logits: torch.Tensor) -> torch.Tensor:
    """Quality cues for the confidence head, per mask.

    (..., n, H, W) logits -> (..., n, 5): mean probability, max
    probability, mean sharpness |p - 0.5|, probability spread, and the
    self-weighted mean probability sum(p^2)/sum(p) (a smooth stand-in for
    the mean probability inside the predicted mask). All five are smooth
    in the logits, so gradient checks through the full loss stay exact.
    """
    p = torch.sigmoid(mask_logits).flatten(-2)
    return torch.stack(
        [
            p.mean(-1),
            p.max(-1).values,
            (p - 0.5).abs().mean(-1),
            p.std(-1),
            (p * p).sum(-1) / (p.sum(-1) + 1e-6),
        ],
        dim=-1,
    )


def hypernetwork_logits(mask_embed: torch.Tensor, pixel_features: torch.Tensor) -> torch.Tensor:
    """Channel dot product at every spatial location.

    mask_embed (B, n, d'), pixel_features (B, H, W, d') -> (B, n, H, W).
    """
    if mask_embed.shape[-1] != pixel_features.shape[-1]:
        raise ShapeMismatchError(
            f"mask embed dim {mask_embed.shape[-1]} != pixel dim {pixel_features.shape[-1]}"
        )
    return torch.einsum("bnd,bhwd->bnhw", mask_embed, pixel_features)


class HierDecoder(nn.Module):
    """Parent decoding -> parent-specific enhancement -> child decoding,
    with per-mask confidence prediction at both levels."""

    def __init__(self, cfg: NetConfig, hierarchy: ConceptHierarchy, parent_level: int = 0):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.bank = QueryBank(hierarchy, d, parent_level)
        self.parent_head = SegmentationHead(cfg.decoder_heads)
        self.child_head = SegmentationHead(cfg.decoder_heads)
        self.pixel_decoder = PixelDecoder(cfg)
        self.parent_mask_mlp = mlp_head(d, d, cfg.mask_dim)
        self.child_mask_mlp = mlp_head(d, d, cfg.mask_dim)
        # one stride-4 conv stack: (B, n_P, 4G, 4G) -> (B, d, G, G)
        self.mask_encoder = nn.Conv2d(self.bank.n_parent, d, kernel_size=4, stride=4)
        self.conf_stats_proj = nn.Linear(5, d)
        self.conf_mlp = mlp_head(d, d, 1)
        self.enhancer_enabled = True  # ablation switch for the enhancement path
        self.detach_parent_logits = False  # optionally cut gradients into the enhancer

    def _decode_level(self, tokens, pos, queries, conf_tokens, head, mask_mlp):
        b = tokens.shape[0]
        n = queries.shape[0]
        stream = torch.cat([queries, conf_tokens], dim=0).expand(b, -1, -1)
        tokens, stream = head(tokens, stream, pos)
        mask_q, conf_q = stream[:, :n], stream[:, n:]
        g = int(round(tokens.shape[1] ** 0.5))
        pixel_features = self.pixel_decoder(tokens.reshape(b, g, g, -1))
        logits = hypernetwork_logits(mask_mlp(mask_q), pixel_features)
        # each confidence token scores exactly one mask: pair it with its
        # mask query, and let the head read summary statistics of the mask
        # it is judging
        conf_in = conf_q + mask_q + self.conf_stats_proj(mask_statistics(logits))
        conf = torch.sigmoid(self.conf_mlp(conf_in)).squeeze(-1)
        return tokens, logits, conf

    def decode_parent(self, embedding: ImageEmbedding):
        """Returns (parent_logits, parent confidences, updated token stream)."""
        b, g = embedding.tokens.shape[0], embedding.tokens.shape[1]
        tokens = embedding.tokens.reshape(b, g * g, -1)
        pos = embedding.pos.reshape(g * g, -1)
        conf_tokens = self.bank.conf_tokens[: self.bank.n_parent]
        tokens, logits, conf = self._decode_level(
            tokens, pos, self.bank.parent_queries, conf_tokens,
            self.parent_head, self.parent_mask_mlp,
        )
        return logits, conf, tokens

    def enhance_with_parent(self, tokens, pos, parent_logits):
        """Inject encoded parent masks into the token stream.

        tokens (B, G*G, d) act as queries (with positional encoding), the
        encoded mask tokens as keys and values; the update is residual, so
        zero mask tokens leave the stream untouched.
        """
        if not self.enhancer_enabled:
            return tokens
        y = parent_logits.detach() if self.detach_parent_logits else parent_logits
        # encode the bounded mask probabilities, not raw logits: logit
        # magnitudes grow during training and blow up the injected tokens
        y = self.mask_encoder(torch.sigmoid(y))  # (B, d, G, G)
        mask_tokens = y.flatten(2).transpose(1, 2)  # (B, G*G, d)
        mask_tokens = attention(mask_tokens, mask_tokens, mask_tokens, heads=self.cfg.decoder_heads)
        return attention(tokens, mask_tokens, mask_tokens, pos_q=pos, heads=self.cfg.decoder_heads)

    def decode_child(self, tokens, pos):
        """Child-level decoding on the (possibly enhanced) token stream."""
        conf_tokens = self.bank.conf_tokens[self.bank.n_parent :]
        _, logits, conf = self._decode_level(
            tokens, pos, self.bank.child_queries, conf_tokens,
            self.child_head, self.child_mask_mlp,
        )
        return logits, conf

    def forward(self, embedding: ImageEmbedding) -> DecoderOutput:
        b, g = embedding.tokens.shape[0], embedding.tokens.shape[1]
        pos = embedding.pos.reshape(g * g, -1)
        parent_logits, parent_conf, tokens = self.decode_parent(embedding)
        tokens = self.enhance_with_parent(tokens, pos, parent_logits)
        child_logits, child_conf = self.decode_child(tokens, pos)
        return DecoderOutput(
            parent_logits=parent_logits,
            child_logits=child_logits,
            parent_conf=parent_conf,
            child_conf=child_conf,
        )


class HierSegModel(nn.Module):
    """Image encoder plus hierarchical decoder for a two-level hierarchy."""

    def __init__(self, cfg: NetConfig, hierarchy: ConceptHierarchy):
        super().__init__()
        if hierarchy.depth != 1:
            raise ShapeError(
                "the end-to-end model decodes one parent/child level pair; "
                f"got hierarchy depth {hierarchy.depth}"
            )
        self.cfg = cfg
        self.hierarchy = hierarchy
        self.encoder = ImageEncoder(cfg)
        self.decoder = HierDecoder(cfg, hierarchy)

    def forward(self, image: torch.Tensor) -> DecoderOutput:
        squeeze = image.dim() == 3
        embedding = self.encoder(image)
        out = self.decoder(embedding)
        if squeeze:
            out = DecoderOutput(
                parent_logits=out.parent_logits[0],
                child_logits=out.child_logits[0],
                parent_conf=out.parent_conf[0],
                child_conf=out.child_conf[0],
            )
        return out


def hierarchical_probability(
    parent_probs: np.ndarray,
    child_probs: np.ndarray,
    hierarchy: ConceptHierarchy,
    parent_level: int = 0,
) -> np.ndarray:
    """Factorized diagnostic: each child map gated by its parent's map.

    parent_probs (n_P, H, W) and child_probs (n_C, H, W) in hierarchy slot
    order; returns (n_C, H, W) with p(child) = p(parent) * p(child|parent).
    """
    parent_probs = np.asarray(parent_probs, dtype=float)
    child_probs = np.asarray(child_probs, dtype=float)
    parent_ids = hierarchy.level_ids(parent_level)
    child_ids = hierarchy.level_ids(parent_level + 1)
    if parent_probs.shape[0] != len(parent_ids) or child_probs.shape[0] != len(child_ids):
        raise ShapeMismatchError(
            f"expected {len(parent_ids)} parent and {len(child_ids)} child maps, "
            f"got {parent_probs.shape[0]} and {child_probs.shape[0]}"
        )
    if parent_probs.shape[1:] != child_probs.shape[1:]:
        raise ShapeMismatchError(
            f"spatial shapes differ: {parent_probs.shape[1:]} vs {child_probs.shape[1:]}"
        )
    parent_slot = {nid: i for i, nid in enumerate(parent_ids)}
    out = np.empty_like(child_probs)
    for j, child_id in enumerate(child_ids):
        out[j] = parent_probs[parent_slot[hierarchy.parent(child_id)]] * child_probs[j]
    return out


def export_level_maps(
    output: DecoderOutput, hierarchy: ConceptHierarchy, threshold: float = 0.5
) -> dict[int, np.ndarray]:
    """Categorical label maps from decoder logits.

    Per pixel: argmax over concept channels whose sigmoid probability
    exceeds the threshold, background (0) otherwise. Within-level
    exclusivity is enforced here, not in the logits.
    """
    maps = {}
    for level, logits in ((0, output.parent_logits), (1, output.child_logits)):
        ids = np.asarray(hierarchy.level_ids(level), dtype=np.uint16)
        probs = torch.sigmoid(logits.detach()).cpu().numpy()
        if probs.ndim != 3:
            raise ShapeError("export_level_maps expects unbatched logits (n, H, W)")
        best = probs.argmax(axis=0)
        confident = probs.max(axis=0) > threshold
        level_map = np.where(confident, ids[best], np.uint16(0)).astype(np.uint16)
        maps[level] = level_map
    return maps
