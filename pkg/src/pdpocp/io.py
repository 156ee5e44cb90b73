"""CSV/JSON serialisation, run configuration documents and output manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .grid import ControlTrajectory, StateTrajectory, TimeGrid
from .inner import InnerConfig
from .models import InvalidParameterError, make_model
from .pdp import HISTORY_COLUMNS, PdpConfig, StepRule, reference_config

OUT_ENV = "PDPOCP_OUT"


class InputFormatError(ValueError):
    """A malformed input file; the message carries ``path:line``."""


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# CSV


def fmt(value) -> str:
    """17 significant digits, enough to read every double back exactly."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return format(float(value), ".17g")


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path, expect=None):
    """``(header, rows)`` with every field parsed as float (empty -> nan)."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputFormatError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputFormatError(f"{path}:1: empty file, expected a header line") from None
        if expect is not None and tuple(header[: len(expect)]) != tuple(expect):
            raise InputFormatError(f"{path}:1: header {header} does not start with {list(expect)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise InputFormatError(f"{path}:{line}: expected {len(header)} fields, got {len(rec)}")
            try:
                vals = [float(v) if v != "" else float("nan") for v in rec]
            except ValueError:
                raise InputFormatError(f"{path}:{line}: non-numeric field in {rec}") from None
            rows.append(vals)
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def write_controls(path, grid: TimeGrid, u: ControlTrajectory) -> Path:
    header = ["t"] + [f"u{r + 1}" for r in range(u.m)]
    return write_csv(path, header, np.column_stack([grid.control_times, u.values.T]))


def write_states(path, grid: TimeGrid, x: StateTrajectory) -> Path:
    header = ["t"] + [f"x{p + 1}" for p in range(x.n)]
    return write_csv(path, header, np.column_stack([grid.nodes, x.values.T]))


def read_controls(path, t_f: float):
    """Controls written by :func:`write_controls`; returns ``(grid, u)``."""
    header, data = read_csv(path, expect=("t",))
    if len(header) < 2 or not all(h.startswith("u") for h in header[1:]):
        raise InputFormatError(f"{path}:1: expected columns t, u1, ..., got {header}")
    if data.shape[0] < 2:
        raise InputFormatError(f"{path}: need at least 2 control rows, got {data.shape[0]}")
    if not np.all(np.isfinite(data)):
        line = 2 + int(np.argmax(~np.all(np.isfinite(data), axis=1)))
        raise InputFormatError(f"{path}:{line}: non-finite value")
    grid = TimeGrid(t_f, data.shape[0])
    bad = np.flatnonzero(np.abs(data[:, 0] - grid.control_times) > 1e-9 * max(t_f, 1.0))
    if bad.size:
        raise InputFormatError(
            f"{path}:{bad[0] + 2}: time {data[bad[0], 0]!r} is off the uniform grid on [0, {t_f}]"
        )
    return grid, ControlTrajectory(data[:, 1:].T)


def write_history(path, iterates) -> Path:
    return write_csv(path, HISTORY_COLUMNS, [it.row() for it in iterates])


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")


# ----------------------------------------------------------------------------
# manifest


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def code_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "unknown"


class Manifest:
    """Records every emitted file together with the hash of the run config."""

    def __init__(self, out_dir, config: dict, command: str):
        self.out_dir = Path(out_dir)
        self.config = config
        self.hash = config_hash(config)
        self.command = command
        self.entries = []

    def add(self, path):
        path = Path(path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.entries.append({"file": path.name, "sha256": digest, "config_hash": self.hash})
        return path

    def write(self) -> Path:
        return write_json(self.out_dir / "manifest.json", {
            "command": self.command,
            "config": self.config,
            "config_hash": self.hash,
            "code_version": code_version(),
            "files": self.entries,
        })


def output_dir(cli_value=None, default="out") -> Path:
    """``$PDPOCP_OUT`` wins over the command line, which wins over ``default``."""
    env = os.environ.get(OUT_ENV)
    return Path(env if env else (cli_value or default))


# ----------------------------------------------------------------------------
# run configuration documents

_TOP_KEYS = {"model", "model_params", "N", "step_rule", "pdp", "inner", "experiment", "out", "init", "seed"}
_PDP_KEYS = {"c0", "alpha", "eps", "max_outer", "alpha_in_step", "eta", "beta", "theta", "pick"}
_EXPERIMENT_KEYS = {"kind", "N", "c_values", "runs", "seed", "init_range", "timing", "threads"}


def _check_keys(section: str, doc: dict, allowed: set):
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


def load_config(path) -> dict:
    """Read and validate a JSON run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    validate_config(doc)
    return doc


def validate_config(doc: dict) -> dict:
    _check_keys("config", doc, _TOP_KEYS)
    _check_keys("pdp", doc.get("pdp", {}), _PDP_KEYS)
    _check_keys("inner", doc.get("inner", {}), {f.name for f in fields(InnerConfig)})
    _check_keys("experiment", doc.get("experiment", {}), _EXPERIMENT_KEYS)
    if doc.get("init", "zero") not in ("zero", "random"):
        raise ConfigError("init must be 'zero' or 'random'")
    try:
        build_model(doc)
        build_pdp_config(doc)
    except (InvalidParameterError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return doc


def build_model(doc: dict):
    if "model" not in doc:
        raise ConfigError("config: missing model tag")
    return make_model(doc["model"], **doc.get("model_params", {}))


def build_inner_config(doc: dict) -> InnerConfig:
    return InnerConfig(**doc.get("inner", {}))


def build_pdp_config(doc: dict) -> PdpConfig:
    """Reference parameters for the model and step rule, with overrides applied."""
    variant = int(doc.get("step_rule", 2))
    pdp = dict(doc.get("pdp", {}))
    rule_keys = {k: pdp.pop(k) for k in ("eta", "beta", "theta", "pick") if k in pdp}
    inner = build_inner_config(doc)
    if "seed" in doc:
        inner = InnerConfig(**{**asdict(inner), "seed": int(doc["seed"])})
    try:
        base = reference_config(doc["model"], variant)
    except InvalidParameterError:
        if variant not in (1, 2):
            raise
        base = PdpConfig(step_rule=StepRule.type1() if variant == 1 else StepRule.type2())
    if rule_keys:
        rule = asdict(base.step_rule)
        rule.update(rule_keys)
        pdp["step_rule"] = StepRule(**rule)
    for key in ("alpha",):
        if key in pdp:
            pdp[key] = tuple(np.atleast_1d(pdp[key]))
    return PdpConfig(**{**_pdp_fields(base), **pdp, "inner": inner})


def _pdp_fields(cfg: PdpConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(PdpConfig)}


def pdp_config_dict(cfg: PdpConfig) -> dict:
    out = _pdp_fields(cfg)
    out["step_rule"] = asdict(cfg.step_rule)
    out["inner"] = asdict(cfg.inner)
    return out
