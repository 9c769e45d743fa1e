"""Episode recording and replay-friendly export.

An EpisodeLog is a pure function of (config, seed): it holds per-tick
states and applied controls for every agent, the per-pair barrier values,
and event annotations. Wall-clock loop times ride along as measurement
metadata and are excluded from the deterministic CSV export.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EpisodeLog:
    ids: np.ndarray                  # (N,) agent ids
    times: np.ndarray                # (T,)
    states: np.ndarray               # (T, N, 4): x, y, theta, v
    controls: np.ndarray             # (T, N, 2): delta, a_c
    pair_src: np.ndarray             # (P,) ordered-pair source indices
    pair_dst: np.ndarray             # (P,)
    pair_h: np.ndarray               # (T, P) control-ellipse values
    pair_h0: np.ndarray              # (T, P) reporting-ellipse values
    changer: np.ndarray              # (N,) bool
    nra: np.ndarray                  # (N,) bool
    target_y: np.ndarray             # (N,) target-lane centerline
    desired_speed: np.ndarray        # (N,)
    bsm_count: np.ndarray            # (T, N) messages in the snapshot
    loop_ms: np.ndarray | None       # (T, N) filter wall time, None on replay
    events: list = field(default_factory=list)   # (t, id, tag)
    timeout: bool = False
    config: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.ids)

    @property
    def n_ticks(self) -> int:
        return len(self.times)

    def agent_flags(self, k: int) -> str:
        flags = "C" if self.changer[k] else "S"
        if self.nra[k]:
            flags += "N"
        return flags

    def to_csv(self, path=None) -> str:
        """One row per tick per agent; byte-deterministic for a given log."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "id", "x", "y", "theta", "v", "delta", "a_c", "flags"])
        fallback_at = {(t, i) for t, i, tag in self.events if tag == "fallback"}
        for ti, t in enumerate(self.times):
            for k, vid in enumerate(self.ids):
                flags = self.agent_flags(k)
                if (float(t), int(vid)) in fallback_at:
                    flags += "F"
                s = self.states[ti, k]
                u = self.controls[ti, k]
                wr.writerow([f"{t:.10g}", int(vid),
                             f"{s[0]:.10g}", f"{s[1]:.10g}", f"{s[2]:.10g}",
                             f"{s[3]:.10g}", f"{u[0]:.10g}", f"{u[1]:.10g}", flags])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def sidecar(self, metrics: dict, path=None) -> str:
        payload = {"config": self.config, "metrics": metrics,
                   "events": [[float(t), int(i), tag] for t, i, tag in self.events],
                   "timeout": self.timeout}
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def ordered_pair_indices(n: int):
    src, dst = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = src != dst
    return src[keep], dst[keep]


def load_csv(path, config: dict | None = None) -> EpisodeLog:
    """Rebuild a log from its CSV export (controls/states only).

    Pair barrier values are recomputed by the caller from states; loop
    times are unavailable on replay.
    """
    rows = []
    with open(path) as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            rows.append(row)
    times = sorted({float(r["t"]) for r in rows})
    ids = sorted({int(r["id"]) for r in rows})
    t_index = {t: i for i, t in enumerate(times)}
    id_index = {a: i for i, a in enumerate(ids)}
    T, N = len(times), len(ids)
    states = np.zeros((T, N, 4))
    controls = np.zeros((T, N, 2))
    changer = np.zeros(N, dtype=bool)
    nra = np.zeros(N, dtype=bool)
    events = []
    for r in rows:
        ti, k = t_index[float(r["t"])], id_index[int(r["id"])]
        states[ti, k] = [float(r["x"]), float(r["y"]), float(r["theta"]), float(r["v"])]
        controls[ti, k] = [float(r["delta"]), float(r["a_c"])]
        changer[k] = "C" in r["flags"]
        nra[k] = "N" in r["flags"]
        if "F" in r["flags"]:
            events.append((float(r["t"]), ids[k], "fallback"))
    src, dst = ordered_pair_indices(N)
    cfg = config or {}
    lane_w = float(cfg.get("lane_width", 3.5))
    target_y = np.where(changer ^ (states[0, :, 1] > lane_w / 2.0), lane_w, 0.0)
    return EpisodeLog(
        ids=np.array(ids), times=np.array(times), states=states, controls=controls,
        pair_src=src, pair_dst=dst,
        pair_h=np.zeros((T, 0)), pair_h0=np.zeros((T, 0)),
        changer=changer, nra=nra, target_y=target_y,
        desired_speed=states[0, :, 3].copy(),
        bsm_count=np.zeros((T, N), dtype=int), loop_ms=None,
        events=events, config=cfg)
