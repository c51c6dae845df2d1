'''
descriptor_field.py - contextual descriptor fields
==================================================

A descriptor field maps a query position ``q`` in a scene to a unit
vector summarising the keypoints within radius ``r`` of ``q``.  Every
neighbour becomes one token, the concatenation of

* a learned embedding of its distance to ``q`` (a one hidden layer MLP),
* a learned embedding of its semantic label (row 0 is the corner label).

A ``[CLS]`` token is prepended, the sequence passes through a pre-norm
transformer encoder without positional encoding, and the ``[CLS]``
output is projected to ``d`` dimensions and L2 normalised.  Since the
tokens only see distances and labels the descriptor is invariant to
rigid motions of query and scene together and to the order of the
neighbours.

An empty neighbourhood evaluates to the ``[CLS]`` only sequence.

Neighbourhood membership is looked up once per evaluation and treated
as constant when differentiating with respect to the query.

The learned weights (the descriptor field parameters) live in a
:class:`ContextField` module; :meth:`ContextField.params` and
:meth:`ContextField.load_params` move them in and out as an ordered
mapping of named float64 tensors.
'''

import collections
import math
from dataclasses import dataclass

import numpy as np
import pandas
import torch
from torch import nn

import cgatcore.experiment as E

from scenemap.errors import ValidationError
from scenemap.numeric_core import (DTYPE, LAYER_NORM_EPS, check_finite,
                                   safe_norm)
from scenemap.scene_model import (KEYPOINTS_PER_OBJECT, as_points,
                                  inside_hull, neighborhood_indices)


@dataclass(frozen=True)
class FieldConfig:
    '''architecture of a descriptor field.'''

    r: float = 0.75
    d: int = 256
    emb_dim: int = 32
    model_dim: int = 64
    layers: int = 6
    heads: int = 8
    num_classes: int = 8
    use_semantic: bool = True
    use_distance: bool = True
    distance_hidden: int = 64
    ff_dim: int = 128
    keypoints_per_object: int = KEYPOINTS_PER_OBJECT
    chunk_size: int = 128

    def __post_init__(self):
        if self.r <= 0:
            raise ValidationError("radius must be positive, got {}".format(self.r))
        for name in ("d", "emb_dim", "model_dim", "layers", "heads",
                     "num_classes", "distance_hidden", "ff_dim",
                     "keypoints_per_object", "chunk_size"):
            if getattr(self, name) <= 0:
                raise ValidationError(
                    "{} must be positive, got {}".format(
                        name, getattr(self, name)))
        if self.model_dim != 2 * self.emb_dim:
            raise ValidationError(
                "model_dim {} must equal two embeddings of size {}".format(
                    self.model_dim, self.emb_dim))
        if self.model_dim % self.heads:
            raise ValidationError(
                "{} heads do not divide model_dim {}".format(
                    self.heads, self.model_dim))


class EncoderLayer(nn.Module):
    '''pre-norm self attention and GELU feed-forward block.'''

    def __init__(self, model_dim, heads, ff_dim):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(model_dim, eps=LAYER_NORM_EPS)
        self.qkv = nn.Linear(model_dim, 3 * model_dim)
        self.proj = nn.Linear(model_dim, model_dim)
        self.norm2 = nn.LayerNorm(model_dim, eps=LAYER_NORM_EPS)
        self.ff = nn.Sequential(nn.Linear(model_dim, ff_dim),
                                nn.GELU(),
                                nn.Linear(ff_dim, model_dim))

    def forward(self, x, mask):
        # x: (batch, tokens, model_dim); mask: (batch, tokens), True = real
        batch, length, width = x.shape
        head_dim = width // self.heads
        q, k, v = (self.qkv(self.norm1(x))
                   .view(batch, length, 3, self.heads, head_dim)
                   .permute(2, 0, 3, 1, 4))
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ v
        x = x + self.proj(attended.transpose(1, 2).reshape(batch, length, width))
        return x + self.ff(self.norm2(x))


class ContextField(nn.Module):
    '''the descriptor field D(q; S, r).'''

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.semantic_table = nn.Embedding(cfg.num_classes + 1, cfg.emb_dim)
        self.distance_mlp = nn.Sequential(nn.Linear(1, cfg.distance_hidden),
                                          nn.GELU(),
                                          nn.Linear(cfg.distance_hidden,
                                                    cfg.emb_dim))
        self.cls_token = nn.Parameter(
            torch.randn(cfg.model_dim, dtype=DTYPE) * 0.02)
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg.model_dim, cfg.heads, cfg.ff_dim)
            for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(cfg.model_dim, eps=LAYER_NORM_EPS)
        self.out_proj = nn.Linear(cfg.model_dim, cfg.d)
        self.to(DTYPE)

    def params(self):
        '''copy of the learned weights as an ordered name -> tensor map.'''
        return collections.OrderedDict(
            (name, value.detach().clone())
            for name, value in self.state_dict().items())

    def load_params(self, params):
        own = self.state_dict()
        if list(own) != list(params):
            raise ValidationError(
                "parameter names do not match the field architecture")
        for name, value in params.items():
            if tuple(own[name].shape) != tuple(value.shape):
                raise ValidationError(
                    "parameter {} has shape {}, expected {}".format(
                        name, tuple(value.shape), tuple(own[name].shape)))
            check_finite(torch.as_tensor(value), "parameter " + name)
        self.load_state_dict(params)
        return self

    def neighborhoods(self, queries, scene):
        return neighborhood_indices(queries, scene, self.cfg.r,
                                    self.cfg.keypoints_per_object)

    def embed(self, queries, scene, neighborhoods):
        '''token sequences and key masks for a batch of queries.

        Row 0 of every sequence is the [CLS] token; padded positions are
        zero and masked out.
        '''
        cfg = self.cfg
        kp = scene.keypoints(cfg.keypoints_per_object)
        if len(kp.labels) and int(kp.labels.max()) > cfg.num_classes:
            raise ValidationError(
                "scene has label {}, the field knows labels up to {}".format(
                    int(kp.labels.max()), cfg.num_classes))
        batch = len(neighborhoods)
        length = max([len(n) for n in neighborhoods] + [0])
        index = np.zeros((batch, length), dtype=np.int64)
        valid = np.zeros((batch, length), dtype=bool)
        for row, idx in enumerate(neighborhoods):
            index[row, :len(idx)] = idx
            valid[row, :len(idx)] = True

        index = torch.as_tensor(index)
        valid = torch.as_tensor(valid)
        positions = torch.as_tensor(kp.positions, dtype=DTYPE)[index]
        labels = torch.as_tensor(kp.labels)[index]

        dist = safe_norm(queries[:, None, :] - positions).unsqueeze(-1)
        dist_emb = self.distance_mlp(dist)
        sem_emb = self.semantic_table(labels)
        if not cfg.use_distance:
            dist_emb = torch.zeros_like(dist_emb)
        if not cfg.use_semantic:
            sem_emb = torch.zeros_like(sem_emb)
        tokens = torch.cat([dist_emb, sem_emb], dim=-1) * valid[..., None]

        cls = self.cls_token.expand(batch, 1, cfg.model_dim)
        tokens = torch.cat([cls, tokens], dim=1)
        mask = torch.cat([torch.ones(batch, 1, dtype=torch.bool), valid], dim=1)
        return tokens, mask

    def encode(self, tokens, mask):
        x = tokens
        for layer in self.encoder:
            x = layer(x, mask)
        out = self.out_proj(self.final_norm(x[:, 0]))
        out = out / safe_norm(out, keepdim=True)
        return check_finite(out, "descriptor")

    def describe(self, queries, scene, neighborhoods=None):
        '''descriptors of a (batch, 3) query tensor, differentiable with
        respect to the queries.'''
        if neighborhoods is None:
            neighborhoods = self.neighborhoods(
                queries.detach().cpu().numpy(), scene)
        tokens, mask = self.embed(queries, scene, neighborhoods)
        return self.encode(tokens, mask)

    def forward(self, queries, scene):
        return self.describe(queries, scene)

    def descriptors(self, points, scene):
        '''descriptors of many points, evaluated in chunks without
        gradient tracking.'''
        pts = as_points(points)
        chunks = []
        with torch.no_grad():
            for start in range(0, len(pts), self.cfg.chunk_size):
                q = torch.as_tensor(pts[start:start + self.cfg.chunk_size],
                                    dtype=DTYPE)
                chunks.append(self.describe(q, scene))
        if not chunks:
            return torch.zeros((0, self.cfg.d), dtype=DTYPE)
        return torch.cat(chunks)


def init_field(cfg, seed=0):
    '''a freshly initialised field; identical for identical seeds.'''
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        field = ContextField(cfg)
    E.debug("initialised descriptor field with {} parameters".format(
        sum(p.numel() for p in field.parameters())))
    return field


def tokenize(q, scene, field):
    '''token sequence of one query: [CLS] followed by one token per
    neighbourhood keypoint, in keypoint order.'''
    q = torch.as_tensor(np.asarray(q, dtype=np.float64).reshape(1, 3))
    with torch.no_grad():
        tokens, _ = field.embed(q, scene, field.neighborhoods(q.numpy(), scene))
    return tokens[0]


def field_eval(q, scene, field):
    '''unit descriptor of a single query point.'''
    q = torch.as_tensor(np.asarray(q, dtype=np.float64).reshape(1, 3))
    with torch.no_grad():
        return field.describe(q, scene)[0].numpy()


def field_query_jacobian(q, scene, field):
    '''(d, 3) derivative of the descriptor at *q* with respect to *q*,
    neighbourhood membership held fixed.'''
    q = torch.as_tensor(np.asarray(q, dtype=np.float64).reshape(3))
    nbhd = field.neighborhoods(q.numpy().reshape(1, 3), scene)
    if len(nbhd[0]) == 0:
        return np.zeros((field.cfg.d, 3))

    def describe(x):
        return field.describe(x.reshape(1, 3), scene, neighborhoods=nbhd)[0]

    jac = torch.autograd.functional.jacobian(describe, q)
    return check_finite(jac, "query jacobian").numpy()


def field_distance_grid(field, scene_tgt, q, scene_ref, resolution, z=None):
    '''descriptor distance between *q* in the target scene and every
    point of a regular grid over the reference scene's hull.

    Grid coordinates are ``lo + i * resolution`` where ``lo`` is the
    minimum corner of the reference scene.  With *z* set the grid is the
    horizontal slice at that height.  Returns a table with columns x, y,
    z and distance.
    '''
    if resolution <= 0:
        raise ValidationError(
            "grid resolution must be positive, got {}".format(resolution))
    lo = scene_ref.corners.min(axis=0)
    hi = scene_ref.corners.max(axis=0)
    axes = [lo[i] + resolution * np.arange(
        int(np.floor((hi[i] - lo[i]) / resolution + 1e-9)) + 1)
        for i in range(3)]
    if z is not None:
        axes[2] = np.array([float(z)])
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid[inside_hull(grid, scene_ref.corners, 1e-9)]
    E.debug("evaluating descriptor distances on {} grid points".format(
        len(grid)))

    anchor = torch.as_tensor(field_eval(q, scene_tgt, field))
    values = field.descriptors(grid, scene_ref)
    dist = safe_norm(values - anchor).numpy()
    return pandas.DataFrame({"x": grid[:, 0], "y": grid[:, 1],
                             "z": grid[:, 2], "distance": dist})
