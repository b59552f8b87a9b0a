"""MSTGCN forward pass: gated temporal conv, fused multi-graph conv, external head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Node, ParamStore
from .graphs import ELASTIC, GEOGRAPHIC, INFLUENTIAL, elastic_adjacency, init_elastic, propagation

VARIANTS = ("full", "gs", "rs", "nonE", "nonT")

VARIANT_GRAPHS = {
    "full": (GEOGRAPHIC, INFLUENTIAL, ELASTIC),
    "gs": (GEOGRAPHIC, ELASTIC),
    "rs": (INFLUENTIAL, ELASTIC),
    "nonE": (GEOGRAPHIC, INFLUENTIAL, ELASTIC),
    "nonT": (GEOGRAPHIC, INFLUENTIAL, ELASTIC),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_stations: int
    h: int = 15
    f: int = 1
    m: int = 3
    c_out: int = 64
    c_sout: int = 16
    variant: str = "full"
    seed: int = 0
    tie_glu_kernels: bool = False
    elastic_nonneg: str = "abs"

    def __post_init__(self):
        for key in ("n_stations", "h", "f", "m", "c_out", "c_sout"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.h < 2 * self.m - 1:
            raise ConfigError(f"h={self.h} too short for two temporal convolutions of width m={self.m}")
        if self.elastic_nonneg not in ("abs", "relu"):
            raise ConfigError(f"elastic_nonneg must be 'abs' or 'relu', got {self.elastic_nonneg!r}")

    @property
    def graphs(self) -> tuple[str, ...]:
        return VARIANT_GRAPHS[self.variant]

    @property
    def uses_external(self) -> bool:
        return self.variant != "nonE"

    @property
    def t1(self) -> int:
        return self.h - self.m + 1

    @property
    def t2(self) -> int:
        return self.h - 2 * self.m + 2

    @property
    def head_width(self) -> int:
        return self.t2 * self.c_out + (2 * self.h if self.uses_external else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def _kaiming(store: ParamStore, name: str, shape, fan_in: int) -> Node:
    return store.normal(name, shape, np.sqrt(2.0 / fan_in))


class MSTGCN:
    """Network parameters plus the static graph propagations.

    ``geographic`` and ``influential`` are ``[V, V]`` adjacency matrices;
    only the ones the variant uses are required.
    """

    def __init__(self, config: ModelConfig, geographic=None, influential=None):
        self.config = cfg = config
        v = cfg.n_stations
        self.propagations: dict[str, np.ndarray] = {}
        for kind, adj in ((GEOGRAPHIC, geographic), (INFLUENTIAL, influential)):
            if kind not in cfg.graphs:
                continue
            if adj is None:
                raise ConfigError(f"variant {cfg.variant!r} needs the {kind} adjacency")
            adj = np.asarray(adj, dtype=np.float64)
            if adj.shape != (v, v):
                raise DimensionError(f"{kind} adjacency {adj.shape} does not match V={v}")
            self.propagations[kind] = propagation(adj)

        store = self.params = ParamStore(cfg.seed)
        c_in2 = cfg.c_sout
        for k, c_in in ((1, 1), (2, c_in2)):
            _kaiming(store, f"temporal{k}.gamma.kernel", (1, cfg.m, c_in, cfg.c_out), cfg.m * c_in)
            store.zeros(f"temporal{k}.gamma.bias", (cfg.c_out,))
            if not cfg.tie_glu_kernels:
                _kaiming(store, f"temporal{k}.psi.kernel", (1, cfg.m, c_in, cfg.c_out), cfg.m * c_in)
                store.zeros(f"temporal{k}.psi.bias", (cfg.c_out,))
        for kind in cfg.graphs:
            _kaiming(store, f"spatial.{kind}.weight", (cfg.c_out, cfg.c_sout), cfg.c_out)
        init_elastic(v, store)
        _kaiming(store, "head.weight", (cfg.head_width, cfg.f), cfg.head_width)
        store.zeros("head.bias", (cfg.f,))

    # -- blocks ---------------------------------------------------------------

    def temporal_block(self, x: Node, k: int) -> Node:
        p = self.params
        gamma = dc.conv_time(x, p[f"temporal{k}.gamma.kernel"], p[f"temporal{k}.gamma.bias"])
        if self.config.tie_glu_kernels:
            psi = dc.sigmoid(gamma)
        else:
            psi = dc.sigmoid(dc.conv_time(x, p[f"temporal{k}.psi.kernel"], p[f"temporal{k}.psi.bias"]))
        return dc.add(gamma, dc.hadamard(gamma, psi))

    def graph_propagation(self, kind: str) -> Node:
        if kind == ELASTIC:
            return propagation(elastic_adjacency(self.params["elastic.a"]), nonneg=self.config.elastic_nonneg)
        return dc.constant(self.propagations[kind])

    def spatial_block(self, x: Node) -> Node:
        # x: [..., V, T, C_out]
        lead = x.shape[:-3]
        v, t, c = x.shape[-3:]
        flat = dc.reshape(x, lead + (v, t * c))
        fused = None
        for kind in self.config.graphs:
            mixed = dc.reshape(dc.matmul(self.graph_propagation(kind), flat), lead + (v, t, c))
            out = dc.relu(dc.matmul(mixed, self.params[f"spatial.{kind}.weight"]))
            fused = out if fused is None else dc.add(fused, out)
        if fused is None:
            raise ConfigError("variant has no graphs")
        return fused

    def head(self, xt: Node, ext=None) -> Node:
        cfg = self.config
        lead = xt.shape[:-2]
        feats = dc.reshape(xt, lead + (xt.shape[-2] * xt.shape[-1],))
        if cfg.uses_external:
            if ext is None:
                raise ConfigError("this variant needs external factors")
            ext = np.asarray(ext, dtype=np.float64)
            if ext.shape[-2:] != (cfg.h, 2):
                raise DimensionError(f"external factors {ext.shape} must end in (h={cfg.h}, 2)")
            feats = dc.concat_last([feats, ext.reshape(ext.shape[:-2] + (2 * cfg.h,))])
        if feats.shape[-1] != cfg.head_width:
            raise DimensionError(f"head input width {feats.shape[-1]} != {cfg.head_width}")
        return dc.add_bias(dc.matmul(feats, self.params["head.weight"]), self.params["head.bias"])

    def forward(self, window, ext=None) -> Node:
        """Normalized-scale prediction.

        ``window`` is ``[V, h]`` / ``[V, h, 1]`` or batched ``[B, V, h(, 1)]``;
        ``ext`` matches with a trailing ``(h, 2)``. Output is ``[(B,) V, f]``.
        """
        cfg = self.config
        x = np.asarray(window, dtype=np.float64)
        if x.shape[-1] != 1 or x.ndim == 2:
            x = x[..., None]
        if x.shape[-3:] != (cfg.n_stations, cfg.h, 1) or x.ndim not in (3, 4):
            raise DimensionError(f"window {x.shape} does not match (V={cfg.n_stations}, h={cfg.h}, 1)")
        if ext is not None:
            ext = np.asarray(ext, dtype=np.float64)
            if ext.shape[:-1] != x.shape[:-1]:
                raise DimensionError(f"external factors {ext.shape} do not align with window {x.shape}")
        y1 = self.temporal_block(dc.constant(x), 1)
        y2 = self.spatial_block(y1)
        xt = self.temporal_block(y2, 2)
        return self.head(xt, ext if cfg.uses_external else None)

    def predict(self, window, ext=None) -> np.ndarray:
        return self.forward(window, ext).value
