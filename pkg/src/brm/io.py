"""File formats: MDP/ParamPoint/report JSON, dataset/trace/sweep CSV, run manifests.

Floats are written with 17 significant digits so every file round-trips
exactly and reruns can be compared by digest. Writes are atomic.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvariantError
from .mdp import TabularMdp, TransitionDataset
from .objective import ParamPoint

FORMAT_VERSION = 1


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dump_json(path, obj) -> Path:
    # json writes floats with repr, which is already round-trip exact
    return atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=True) + "\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header: list[str], rows) -> Path:
    lines = [",".join(header)]
    lines += [",".join(fmt(x) for x in row) for row in rows]
    return atomic_write(path, "\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# MDP

def mdp_to_dict(mdp: TabularMdp) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "beta": mdp.discount,
        "reward": mdp.reward,
        "transition": mdp.transition,
        "init_dist": mdp.init_dist,
    }


def mdp_from_dict(d: dict) -> TabularMdp:
    mdp = TabularMdp(np.array(d["transition"], dtype=float), np.array(d["reward"], dtype=float),
                     float(d["beta"]), np.array(d["init_dist"], dtype=float))
    if (mdp.n_states, mdp.n_actions) != (d["n_states"], d["n_actions"]):
        raise DimensionError("declared sizes disagree with the arrays")
    return mdp


def save_mdp(path, mdp: TabularMdp) -> Path:
    return dump_json(path, mdp_to_dict(mdp))


def load_mdp(path) -> TabularMdp:
    return mdp_from_dict(load_json(path))


# ----------------------------------------------------------------------------
# datasets

DATASET_HEADER = ["idx", "s", "a", "r", "s_next"]


def policy_hash(policy: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(policy, dtype=np.float64).tobytes()).hexdigest()[:16]


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def save_dataset(path, data: TransitionDataset) -> tuple[Path, Path]:
    rows = ((i, s, a, r, sn) for i, (s, a, r, sn) in enumerate(zip(data.s, data.a, data.r, data.s_next)))
    csv_path = write_csv(path, DATASET_HEADER, rows)
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": data.seed,
        "mode": data.mode,
        "n": len(data),
        "policy_hash": policy_hash(data.behavior_policy),
        "behavior_policy": data.behavior_policy,
        "meta": data.meta,
    }
    return csv_path, dump_json(_sidecar(path), meta)


def load_dataset(path, mdp: TabularMdp | None = None) -> TransitionDataset:
    header, rows = read_csv(path)
    if header != DATASET_HEADER:
        raise InvariantError(f"unexpected dataset header {header}", row=None)
    cols = {name: [] for name in DATASET_HEADER}
    for j, row in enumerate(rows):
        if len(row) != len(DATASET_HEADER):
            raise InvariantError(f"expected {len(DATASET_HEADER)} fields, got {len(row)}", row=j)
        try:
            for name, val in zip(DATASET_HEADER, row):
                cols[name].append(float(val) if name == "r" else int(val))
        except ValueError as exc:
            raise InvariantError(str(exc), row=j) from None
    meta = load_json(_sidecar(path))
    if policy_hash(np.array(meta["behavior_policy"])) != meta["policy_hash"]:
        raise InvariantError("behavior policy does not match its recorded hash", row=None)
    data = TransitionDataset(cols["s"], cols["a"], cols["r"], cols["s_next"], np.array(meta["behavior_policy"]),
                             seed=int(meta["seed"]), mode=meta["mode"], meta=meta.get("meta", {}))
    if mdp is not None:
        data.validate(mdp)
    return data


# ----------------------------------------------------------------------------
# parameters, traces, reports

def save_point(path, p: ParamPoint, **extra) -> Path:
    return dump_json(path, {"format_version": FORMAT_VERSION, "w": p.w, "v": p.v, **extra})


def load_point(path) -> ParamPoint:
    d = load_json(path)
    return ParamPoint(np.array(d["w"], dtype=float), np.array(d["v"], dtype=float))


def save_trace(path, t, phi_gap, f_value, etas) -> Path:
    """``etas`` is the full schedule; the row at step t reports eta_t (NaN at t = T)."""
    eta_at = [etas[int(s)] if int(s) < len(etas) else float("nan") for s in t]
    return write_csv(path, ["t", "phi_gap", "f_value", "eta"], zip(np.asarray(t, dtype=int), phi_gap, f_value, eta_at))


def save_index_log(path, idx: np.ndarray) -> Path:
    B = idx.shape[1] if idx.ndim == 2 else 0
    header = ["t"] + [f"i_{j + 1}" for j in range(B)]
    return write_csv(path, header, ([t, *row] for t, row in enumerate(idx)))


def load_index_log(path) -> np.ndarray:
    header, rows = read_csv(path)
    return np.array([[int(x) for x in row[1:]] for row in rows], dtype=np.int64).reshape(len(rows), len(header) - 1)


SWEEP_HEADER = ["n", "T", "replicates", "eps_mean", "eps_stderr", "bound", "slope_window"]


def save_sweep(path, rows) -> Path:
    return write_csv(path, SWEEP_HEADER, rows)


# ----------------------------------------------------------------------------
# manifest

def build_id() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:  # pragma: no cover - running from a source tree
        return "unknown"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(_jsonable(config), sort_keys=True).encode()).hexdigest()


def now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir, config: dict, seeds: dict, files: list, started: str, status: str = "ok",
                   extra: dict | None = None) -> Path:
    """The manifest is the only file carrying timestamps."""
    out_dir = Path(out_dir)
    listing = []
    for f in sorted({Path(f) for f in files}):
        listing.append({"path": os.path.relpath(f, out_dir), "sha256": sha256(f)})
    body = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(config),
        "build": build_id(),
        "seeds": seeds,
        "started": started,
        "finished": now(),
        "status": status,
        "files": listing,
    }
    if extra:
        body.update(extra)
    return dump_json(out_dir / "manifest.json", body)
