"""Structural and timing parameters of the Octopus fabric."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields


class TilingError(Exception):
    """Cluster size does not tile the TBU grid with rectangles."""


MB = 1 << 20


@dataclass(frozen=True)
class FabricConfig:
    tbu_grid: tuple[int, int] = (8, 8)
    dies: tuple[int, int] = (1, 1)
    tf_queue_capacity_bytes: int = 4 * MB
    packet_header_bytes: int = 64
    data_hop_latency: int = 2
    control_hop_latency: int = 1
    data_link_bandwidth: int = 256
    inter_die_bandwidth: int = 256
    reconfig_latency: int = 1000
    diffusion_period: int = 100_000
    proactive_task_threshold: int = 1000
    transfer_cap_bytes: int = 1 * MB
    # adaptive TBU scheduling
    hysteresis_packets: int = 2
    congestion_watermark_packets: int = 8
    # reactive central baseline
    reactive_threshold: float = 4.0
    reactive_floor_bytes: int = 256 * 1024
    # Task Flow Port: packets accepted per entry cluster per cycle
    injection_per_cycle: int = 1
    # "spread": injections rotate over clusters; "stream": stream_id picks the cluster
    injection_mode: str = "spread"
    epoch_cycles: int = 100_000
    livelock_window: int = 1_000_000

    @property
    def cbu_grid(self) -> tuple[int, int]:
        return (self.tbu_grid[0] + 1, self.tbu_grid[1] + 1)

    @property
    def total_tbu_grid(self) -> tuple[int, int]:
        return (self.tbu_grid[0] * self.dies[0], self.tbu_grid[1] * self.dies[1])

    def check(self) -> None:
        for name in ("data_hop_latency", "control_hop_latency", "reconfig_latency",
                     "diffusion_period", "data_link_bandwidth", "inter_die_bandwidth",
                     "epoch_cycles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.tbu_grid) < 1 or min(self.dies) < 1:
            raise ValueError("grid dimensions must be positive")
        if self.injection_per_cycle < 1:
            raise ValueError("injection_per_cycle must be >= 1")
        if self.injection_mode not in ("spread", "stream"):
            raise ValueError(f"unknown injection_mode {self.injection_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tbu_grid"] = list(self.tbu_grid)
        d["dies"] = list(self.dies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FabricConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fabric keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("tbu_grid", "dies"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def tile_shape(cluster_size: int, grid: tuple[int, int]) -> tuple[int, int]:
    """Rectangle (h, w) with h*w == cluster_size tiling ``grid``; the most
    square such rectangle with h <= w, falling back to h > w."""
    rows, cols = grid
    cands = []
    for h in range(1, cluster_size + 1):
        if cluster_size % h:
            continue
        w = cluster_size // h
        if rows % h == 0 and cols % w == 0:
            cands.append((h > w, abs(math.log(h / w)), h, w))
    if not cands:
        raise TilingError(f"cluster size {cluster_size} does not tile a {rows}x{cols} TBU grid")
    _, _, h, w = min(cands)
    return h, w
