"""Transformation-robust point transformer (TPT) layers and the hierarchical descriptor network."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .formats import read_keyvalue, write_keyvalue
from .geom import PointCloud, estimate_normals, farthest_point_sample, knn_graph, nearest_indices
from .rifeat import FeatureMatrix, fpfh_features, ppf_edges, rri_edges, rri_features

RI_KINDS = ("RRI", "PPF", "FPFH")
POS_CHOICES = ("ri", "xyz", "dxyz")


@dataclass
class TPTConfig:
    k: int = 16
    c_in: int = 64
    c_out: int = 64
    r1: int = 4
    r2: int = 8
    pos: tuple = ("ri",)
    ri_dim: int = 4

    def __post_init__(self):
        self.pos = tuple(self.pos)
        if self.k < 1:
            raise ValueError("TPT needs k >= 1")
        if self.c_out % self.r1 or self.c_out % self.r2:
            raise ValueError(f"c_out={self.c_out} must be divisible by r1={self.r1} and r2={self.r2}")
        bad = set(self.pos) - set(POS_CHOICES)
        if bad or not self.pos:
            raise ValueError(f"positional layout must be a non-empty subset of {POS_CHOICES}")

    @property
    def groups(self) -> int:
        return self.c_out // self.r2

    @property
    def pos_dim(self) -> int:
        return sum({"ri": self.ri_dim, "xyz": 3, "dxyz": 3}[p] for p in self.pos)


@dataclass
class HGMConfig:
    levels: tuple = (768, 384, 192)
    k: int = 16
    ri_kind: str = "PPF"
    cu: int = 64
    cs: tuple = (64, 64, 64)
    r1: int = 4
    r2: int = 8
    pos: tuple = ("ri",)
    normal_k: int = 16
    fpfh_k: int = 16

    def __post_init__(self):
        self.levels = tuple(int(v) for v in self.levels)
        self.cs = tuple(int(v) for v in self.cs)
        self.pos = tuple(self.pos)
        self.ri_kind = self.ri_kind.upper()
        if self.ri_kind not in RI_KINDS:
            raise ValueError(f"ri_kind must be one of {RI_KINDS}, got {self.ri_kind}")
        if len(self.levels) != 3 or len(self.cs) != 3:
            raise ValueError("HGM uses exactly three levels")
        n1, n2, n3 = self.levels
        if not n1 >= n2 >= n3 >= 8:
            raise ValueError(f"level sizes must satisfy N1 >= N2 >= N3 >= 8, got {self.levels}")
        if self.cu <= 0 or min(self.cs) <= 0:
            raise ValueError("channel sizes must be positive")
        for c in (self.cu, *self.cs):
            if c % self.r1 or c % self.r2:
                raise ValueError(f"channel size {c} not divisible by r1={self.r1}/r2={self.r2}")

    @property
    def node_dim(self) -> int:
        return {"RRI": 8, "PPF": 0, "FPFH": 33}[self.ri_kind]

    @property
    def unary_in(self) -> int:
        return 2 * self.node_dim + 4

    def tpt(self, level: int) -> TPTConfig:
        c_in = self.cu if level == 0 else self.cs[level - 1]
        return TPTConfig(self.k, c_in, self.cs[level], self.r1, self.r2, self.pos)

    def to_dict(self) -> dict:
        return {
            "levels": ",".join(map(str, self.levels)),
            "k": self.k,
            "ri_kind": self.ri_kind,
            "cu": self.cu,
            "cs1": self.cs[0], "cs2": self.cs[1], "cs3": self.cs[2],
            "r1": self.r1, "r2": self.r2,
            "pos": ",".join(self.pos),
            "normal_k": self.normal_k,
            "fpfh_k": self.fpfh_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HGMConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown HGM config keys: {sorted(unknown)}")
        base = cls()
        kw = {}
        if "levels" in d:
            kw["levels"] = tuple(int(v) for v in str(d["levels"]).split(","))
        for key in ("k", "cu", "r1", "r2", "normal_k", "fpfh_k"):
            if key in d:
                kw[key] = int(d[key])
        if "ri_kind" in d:
            kw["ri_kind"] = str(d["ri_kind"])
        cs = list(base.cs)
        for i in range(3):
            if f"cs{i + 1}" in d:
                cs[i] = int(d[f"cs{i + 1}"])
        kw["cs"] = tuple(cs)
        if "pos" in d:
            kw["pos"] = tuple(p.strip().lower() for p in str(d["pos"]).split(",") if p.strip())
        return cls(**kw)

    def save(self, path) -> None:
        write_keyvalue(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "HGMConfig":
        return cls.from_dict(read_keyvalue(Path(path)))


@dataclass
class Descriptor:
    unary: Tensor
    smooth: list

    @property
    def blocks(self) -> list:
        return [self.unary, *self.smooth]

    @property
    def sizes(self) -> tuple:
        return tuple(b.shape[1] for b in self.blocks)

    def __len__(self):
        return self.unary.shape[0]

    def concat(self) -> FeatureMatrix:
        return FeatureMatrix(np.concatenate([b.data for b in self.blocks], axis=1), "CONCAT")


# -- layers -------------------------------------------------------------------

def linear(x: Tensor, params: ParamStore, name: str) -> Tensor:
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    lead = x.shape[:-1]
    y = dc.matmul(dc.reshape(x, (-1, x.shape[-1])), w) + b
    return dc.reshape(y, (*lead, w.shape[1]))


def mlp(x: Tensor, params: ParamStore, name: str, depth: int = 2) -> Tensor:
    for i in range(depth):
        x = linear(x, params, f"{name}.{i}")
        if i < depth - 1:
            x = dc.relu(x)
    return x


def init_mlp(params: ParamStore, name: str, dims) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params.linear(f"{name}.{i}", a, b)


def init_tpt(params: ParamStore, name: str, cfg: TPTConfig) -> None:
    c = cfg.c_out
    init_mlp(params, f"{name}.beta", (cfg.c_in, c, c))
    init_mlp(params, f"{name}.eta", (cfg.pos_dim, c, c))
    init_mlp(params, f"{name}.zeta", (cfg.c_in, c, c))
    init_mlp(params, f"{name}.xi", (cfg.c_in, c, c))
    init_mlp(params, f"{name}.gamma", (c, c // cfg.r1, cfg.groups))


def positional(points: np.ndarray, neighbors: np.ndarray, ri: np.ndarray | None, pos) -> np.ndarray:
    """Per-edge positional input rho_ij assembled from the requested parts."""
    parts = []
    for p in pos:
        if p == "ri":
            parts.append(ri)
        elif p == "xyz":
            parts.append(points[neighbors])
        elif p == "dxyz":
            parts.append(points[neighbors] - points[:, None, :])
    return np.concatenate(parts, axis=2)


def tpt_forward(features: Tensor, pos: np.ndarray, neighbors: np.ndarray, cfg: TPTConfig,
                params: ParamStore, name: str = "tpt") -> Tensor:
    """Vector-attention aggregation over a KNN graph.

    ``pos`` is the per-edge positional input (N, K, P). Attention logits come from
    ``zeta(x_i) - xi(x_j) + eta(rho_ij)``; one softmax over the neighbour axis per
    channel group, each group weight shared by ``r2`` channels.
    """
    x = dc.as_tensor(features)
    nbr = np.asarray(neighbors, dtype=np.int64)
    n, k = nbr.shape
    if x.shape != (n, cfg.c_in):
        raise ValueError(f"tpt_forward: features {x.shape} vs expected ({n}, {cfg.c_in})")
    if pos.shape != (n, k, cfg.pos_dim):
        raise ValueError(f"tpt_forward: positional input {pos.shape} vs expected ({n}, {k}, {cfg.pos_dim})")
    c, g = cfg.c_out, cfg.groups
    emb = mlp(Tensor(pos), params, f"{name}.eta")
    value = dc.gather_rows(mlp(x, params, f"{name}.beta"), nbr) + emb
    query = mlp(x, params, f"{name}.zeta")
    key = dc.gather_rows(mlp(x, params, f"{name}.xi"), nbr)
    rel = dc.reshape(query, (n, 1, c)) - key + emb
    w = dc.softmax(mlp(rel, params, f"{name}.gamma"), axis=1)
    value = dc.reshape(value, (n, k, g, cfg.r2))
    out = dc.reduce_sum(value * dc.reshape(w, (n, k, g, 1)), axis=1)
    return dc.reshape(out, (n, c))


def init_hgm_params(cfg: HGMConfig, seed: int = 0) -> ParamStore:
    params = ParamStore(seed)
    init_mlp(params, "unary", (cfg.unary_in, cfg.cu, cfg.cu))
    for level in range(3):
        init_tpt(params, f"tpt{level + 1}", cfg.tpt(level))
    return params


def expected_shapes(cfg: HGMConfig) -> dict:
    return init_hgm_params(cfg).shapes()


# -- geometry preprocessing ---------------------------------------------------

@dataclass
class LevelGraph:
    points: np.ndarray
    neighbors: np.ndarray
    pos: np.ndarray
    # indices into the previous level's points (None at level 1)
    sample: np.ndarray | None = None
    full_index: np.ndarray | None = None


@dataclass
class CloudGraphs:
    levels: list
    unary_input: np.ndarray
    # for levels 2 and 3: index of the nearest sampled point for every full-res point
    upsample: list = field(default_factory=list)


def _edge_ri(cloud: PointCloud, neighbors: np.ndarray, kind: str) -> np.ndarray:
    if kind == "RRI":
        return rri_edges(cloud.points, neighbors)
    return ppf_edges(cloud, neighbors)


def prepare_cloud(cloud: PointCloud, cfg: HGMConfig, fps_start: int = 0) -> CloudGraphs:
    """All non-differentiable geometry for one cloud: graphs, RI inputs, sampling maps."""
    n = len(cloud)
    n2 = min(cfg.levels[1], n)
    n3 = min(cfg.levels[2], n2)
    if n < cfg.levels[2]:
        raise ValueError(f"cloud has {n} points, fewer than the coarsest level {cfg.levels[2]}")
    if n <= cfg.k or n3 <= cfg.k:
        raise ValueError(f"levels need more than k={cfg.k} points, got N={n}, N3={n3}")
    nbr1 = knn_graph(cloud, k=cfg.k).neighbor_indices
    if cfg.ri_kind != "RRI" and cloud.normals is None:
        cloud = estimate_normals(cloud, cfg.normal_k, nbr1)

    levels = []
    cur, full_idx, sample = cloud, np.arange(n), None
    for level, size in enumerate((n, n2, n3)):
        if level:
            start = fps_start if level == 1 else 0
            sample = farthest_point_sample(cur, size, start)
            cur = cur.subset(sample)
            full_idx = full_idx[sample]
        nbr = nbr1 if level == 0 else knn_graph(cur, k=cfg.k).neighbor_indices
        ri = _edge_ri(cur, nbr, cfg.ri_kind) if "ri" in cfg.pos or level == 0 else None
        pos = positional(cur.points, nbr, ri, cfg.pos)
        levels.append(LevelGraph(cur.points, nbr, pos, sample, full_idx))
        if level == 0:
            edge0 = ri

    if cfg.ri_kind == "RRI":
        node = rri_features(cloud, 2).values
    elif cfg.ri_kind == "FPFH":
        node = fpfh_features(cloud, cfg.fpfh_k).values / 100.0
    else:
        node = np.zeros((n, 0))
    k = nbr1.shape[1]
    unary = np.concatenate([np.broadcast_to(node[:, None, :], (n, k, node.shape[1])),
                            node[nbr1], edge0], axis=2)
    ups = [nearest_sampled(cloud.points, lv.full_index) for lv in levels[1:]]
    return CloudGraphs(levels, unary, ups)


def nearest_sampled(points: np.ndarray, coarse_indices) -> np.ndarray:
    """Row of ``coarse_indices`` holding the nearest sampled point; ties go to the lower point index."""
    coarse_indices = np.asarray(coarse_indices, dtype=np.int64)
    if coarse_indices.size == 0:
        raise ValueError("upsample_features: empty coarse set")
    order = np.argsort(coarse_indices, kind="stable")
    return order[nearest_indices(points, points[coarse_indices[order]])]


def upsample_features(coarse: Tensor, coarse_indices, full_cloud) -> Tensor:
    """Give each full-resolution point the feature of its nearest sampled point."""
    pts = full_cloud.points if isinstance(full_cloud, PointCloud) else np.asarray(full_cloud)
    return dc.gather_rows(coarse, nearest_sampled(pts, coarse_indices))


def hgm_forward(cloud: PointCloud, cfg: HGMConfig, params: ParamStore, fps_start: int = 0,
                graphs: CloudGraphs | None = None, identity_tpt: bool = False) -> Descriptor:
    """Per-point descriptor: unary RI term plus three TPT smoothness terms.

    ``identity_tpt`` bypasses every TPT (and its normalisation) so the sampling and
    upsampling plumbing can be checked in isolation.
    """
    g = graphs if graphs is not None else prepare_cloud(cloud, cfg, fps_start)
    unary = dc.reduce_max(mlp(Tensor(g.unary_input), params, "unary"), axis=1)
    x = unary
    smooth = []
    for level in range(3):
        lv = g.levels[level]
        if level:
            x = dc.gather_rows(x, lv.sample)
        if not identity_tpt:
            x = dc.layer_norm(tpt_forward(x, lv.pos, lv.neighbors, cfg.tpt(level), params, f"tpt{level + 1}"))
        smooth.append(x if level == 0 else dc.gather_rows(x, g.upsample[level - 1]))
    return Descriptor(unary, smooth)


def with_levels(cfg: HGMConfig, levels) -> HGMConfig:
    return replace(cfg, levels=tuple(levels))
