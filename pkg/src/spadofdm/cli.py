"""Command-line front end.

Subcommands ``analyze``, ``simulate``, ``metrics``, ``maxrate`` and ``pmf``
write a table as CSV (``#``-prefixed metadata lines, then a header row) or
JSON. Exit codes: 0 success, 2 configuration error, 3 numerical error.

Scenario files are YAML with unit-bearing key names::

    scheme: ACO              # ACO or DCO
    bias_db: 7.0             # DCO only
    constellation: 4
    n_subcarriers: 2048
    symbol_period_s: 1.0e-3
    dead_time_kind: PQ       # PQ or AQ
    count_mode: poisson      # poisson or exact
    target_ber: 1.0e-3
    seed: 0
    power_dbm: {start: -100, stop: -20, step: 1}
    spad: {fill_factor: 0.322, pdp: 0.2, dcr_hz: 7270, afterpulse_prob: 0.01,
           dead_time_ns: 13.5, n_spad: 1024, wavelength_nm: 450}
    simulation: {n_frames: null, min_errors: 100, max_frames: 20000, pilot_frames: 10}
    grid: {schemes: [ACO, DCO-7dB], kinds: [PQ, AQ], constellations: [4, 16],
           symbol_periods_s: [1.0e-3, 1.0e-6]}

Every key is optional; defaults reproduce the receiver hardware and link
settings described in the README. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import shlex
import sys
from dataclasses import replace

import numpy as np
import yaml

from . import __version__
from .analysis import analytic_ber
from .exceptions import ConfigError, NumericalInstabilityError, SupportOverflowError
from .link import LinkScenario, link_metrics, max_bit_rate, run_monte_carlo
from .ofdm import OfdmConfig
from .spad import (CountDistribution, SpadArrayConfig, array_pmf, dead_time_mean_transfer,
                   empirical_array_distribution, potential_counts_from_incident, single_device_pmf)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "scheme": "ACO",
    "bias_db": 7.0,
    "constellation": 4,
    "n_subcarriers": 2048,
    "symbol_period_s": 1e-3,
    "dead_time_kind": "PQ",
    "count_mode": "poisson",
    "target_ber": 1e-3,
    "seed": 0,
    "power_dbm": {"start": -100.0, "stop": -20.0, "step": 1.0},
    "spad": {
        "fill_factor": 0.322,
        "pdp": 0.2,
        "dcr_hz": 7270.0,
        "afterpulse_prob": 0.01,
        "dead_time_ns": 13.5,
        "n_spad": 1024,
        "wavelength_nm": 450.0,
    },
    "simulation": {"n_frames": None, "min_errors": 100, "max_frames": 20000, "pilot_frames": 10},
    "grid": {
        "schemes": ["ACO", "DCO-7dB", "DCO-13dB"],
        "kinds": ["PQ", "AQ"],
        "constellations": [4, 16, 64],
        "symbol_periods_s": [1e-3, 1e-6],
    },
}


# -- configuration ----------------------------------------------------------------

def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        full = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown key '{full}'", key=full)
        if isinstance(defaults[key], dict) and key != "power_dbm":
            if not isinstance(value, dict):
                raise ConfigError(f"'{full}' must be a mapping", key=full)
            out[key] = _merge(defaults[key], value, full + ".")
        elif key == "power_dbm":
            if not isinstance(value, dict) or set(value) - {"start", "stop", "step"}:
                raise ConfigError("'power_dbm' needs start/stop/step", key=full)
            out[key].update(value)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Read a scenario file (or the defaults when ``path`` is None)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}", key="scenario") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed scenario file: {exc}", key="scenario") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("scenario file must contain a mapping", key="scenario")
    return _merge(DEFAULTS, data)


def _number(cfg, key, section=None, cast=float):
    value = cfg[section][key] if section else cfg[key]
    name = f"{section}.{key}" if section else key
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' must be numeric, got {value!r}", key=name) from None


def spad_from_config(cfg: dict) -> SpadArrayConfig:
    s = "spad"
    try:
        return SpadArrayConfig(
            fill_factor=_number(cfg, "fill_factor", s),
            pdp=_number(cfg, "pdp", s),
            dcr=_number(cfg, "dcr_hz", s),
            afterpulse=_number(cfg, "afterpulse_prob", s),
            dead_time=_number(cfg, "dead_time_ns", s) * 1e-9,
            n_spad=_number(cfg, "n_spad", s, int),
            wavelength=_number(cfg, "wavelength_nm", s) * 1e-9,
        )
    except ConfigError as exc:
        names = {"dcr": "dcr_hz", "afterpulse": "afterpulse_prob", "dead_time": "dead_time_ns",
                 "wavelength": "wavelength_nm", "n_spad": "n_spad"}
        key = exc.key if str(exc.key).startswith("spad.") else f"spad.{names.get(exc.key, exc.key)}"
        raise ConfigError(str(exc).replace(str(exc.key), key), key=key) from None


def _ofdm(cfg: dict, scheme=None, M=None, symbol_period=None, bias_db=None) -> OfdmConfig:
    try:
        return OfdmConfig(
            scheme=scheme or cfg["scheme"],
            M=int(M if M is not None else _number(cfg, "constellation", cast=int)),
            N=_number(cfg, "n_subcarriers", cast=int),
            bias_db=float(bias_db if bias_db is not None else _number(cfg, "bias_db")),
            symbol_period=float(symbol_period if symbol_period is not None else _number(cfg, "symbol_period_s")),
        )
    except ConfigError as exc:
        names = {"M": "constellation", "N": "n_subcarriers", "symbol_period": "symbol_period_s"}
        key = names.get(exc.key, exc.key)
        raise ConfigError(str(exc), key=key) from None


def scenario_from_config(cfg: dict, **overrides) -> LinkScenario:
    kind = overrides.pop("kind", cfg["dead_time_kind"])
    try:
        return LinkScenario(ofdm=_ofdm(cfg, **overrides), spad=spad_from_config(cfg), kind=kind,
                            count_mode=cfg["count_mode"], target_ber=_number(cfg, "target_ber"))
    except ConfigError as exc:
        names = {"kind": "dead_time_kind", "symbol_period": "symbol_period_s"}
        raise ConfigError(str(exc), key=names.get(exc.key, exc.key)) from None


def parse_scheme_label(label: str):
    """``"ACO"`` -> ``("ACO", None)``; ``"DCO-13dB"`` -> ``("DCO", 13.0)``."""
    text = str(label).strip().upper()
    if text == "ACO":
        return "ACO", None
    if text == "DCO":
        return "DCO", None
    if text.startswith("DCO-") and text.endswith("DB"):
        try:
            return "DCO", float(text[4:-2])
        except ValueError:
            pass
    raise ConfigError(f"bad scheme label {label!r} (use ACO, DCO or DCO-<bias>dB)", key="grid.schemes")


def parse_power_range(text: str | None, cfg: dict) -> np.ndarray:
    if text is None:
        pr = cfg["power_dbm"]
        start, stop, step = (_number(pr, k) for k in ("start", "stop", "step"))
    else:
        if text.strip() == "":
            return np.empty(0)
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError("--power must be start:stop:step in dBm", key="power")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise ConfigError("--power must be start:stop:step in dBm", key="power") from None
    if step <= 0:
        raise ConfigError("power step must be positive", key="power")
    if stop < start:
        return np.empty(0)
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 10)


# -- output -------------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return repr(float(value))


def _json_value(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if value is None or isinstance(value, str):
        return value
    value = float(value)
    return value if math.isfinite(value) else None


def render_table(columns, rows, metadata: dict, fmt: str) -> str:
    if fmt == "json":
        doc = {"metadata": metadata, "columns": list(columns),
               "rows": [[_json_value(v) for v in row] for row in rows]}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    for key, value in metadata.items():
        buf.write(f"# {key}: {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _metadata(args, cfg: dict) -> dict:
    canonical = json.dumps(cfg, sort_keys=True, default=str)
    cmd = ["spadofdm", args.command]
    for dest, value in vars(args).items():
        if dest in ("command", "out", "seed") or value is None:
            continue
        cmd.append(f"--{dest.replace('_', '-')}=" + shlex.quote(str(value)))
    cmd.append(f"--seed={_seed(args, cfg)}")
    return {
        "tool": f"spadofdm {__version__}",
        "command": " ".join(cmd),
        "seed": _seed(args, cfg),
        "scenario_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "scenario": canonical,
    }


def _seed(args, cfg):
    return int(args.seed) if getattr(args, "seed", None) is not None else int(_number(cfg, "seed", cast=int))


# -- commands -------------------------------------------------------------------

def cmd_analyze(args, cfg):
    powers = parse_power_range(args.power, cfg)
    sc = scenario_from_config(cfg)
    rows = []
    for p in powers:
        rows.append((p, analytic_ber(sc.ofdm, sc.spad, sc.kind, "poisson", p),
                     analytic_ber(sc.ofdm, sc.spad, sc.kind, "exact", p)))
    return ["power_dbm", "ber_poisson", "ber_exact"], rows


def cmd_simulate(args, cfg):
    powers = parse_power_range(args.power, cfg)
    sc = scenario_from_config(cfg)
    sim = cfg["simulation"]
    n_frames = sim["n_frames"]
    if n_frames is not None:
        n_frames = _number(sim, "n_frames", cast=int)
        if n_frames < 1:
            raise ConfigError("simulation.n_frames must be >= 1", key="simulation.n_frames")
    seed = _seed(args, cfg)
    rows = []
    for i, p in enumerate(powers):
        r = run_monte_carlo(sc, p, n_frames=n_frames, seed=(seed, i),
                            min_errors=_number(sim, "min_errors", cast=int),
                            max_frames=_number(sim, "max_frames", cast=int),
                            n_pilot_frames=_number(sim, "pilot_frames", cast=int))
        rows.append((p, r.ber, r.n_bits, r.n_errors, r.ci_low, r.ci_high))
    return ["power_dbm", "ber_mc", "n_bits", "n_errors", "ci_low", "ci_high"], rows


def _grid(cfg):
    grid = cfg["grid"]
    for key in ("schemes", "kinds", "constellations", "symbol_periods_s"):
        if not isinstance(grid[key], list):
            raise ConfigError(f"'grid.{key}' must be a list", key=f"grid.{key}")
    return grid


def cmd_metrics(args, cfg):
    grid = _grid(cfg)
    rows = []
    for label in grid["schemes"]:
        scheme, bias = parse_scheme_label(label)
        for kind in grid["kinds"]:
            for M in grid["constellations"]:
                for ts in grid["symbol_periods_s"]:
                    sc = scenario_from_config(cfg, scheme=scheme, M=int(M), symbol_period=float(ts),
                                              bias_db=bias, kind=kind)
                    m = link_metrics(sc)
                    rows.append((scheme, sc.ofdm.bias_db if scheme == "DCO" else 0.0, sc.kind.value, int(M),
                                 float(ts), m.mpr_dbm, m.moi_dbm, m.lea_db, m.feasible))
    cols = ["scheme", "bias_db", "kind", "M", "symbol_period_s", "mpr_dbm", "moi_dbm", "lea_db", "feasible"]
    return cols, rows


def cmd_maxrate(args, cfg):
    grid = _grid(cfg)
    rows = []
    for label in grid["schemes"]:
        scheme, bias = parse_scheme_label(label)
        for kind in grid["kinds"]:
            for M in grid["constellations"]:
                sc = scenario_from_config(cfg, scheme=scheme, M=int(M), bias_db=bias, kind=kind)
                pt = max_bit_rate(replace(sc, allow_fast_symbols=True))
                rows.append((scheme, sc.ofdm.bias_db if scheme == "DCO" else 0.0, sc.kind.value, int(M),
                             pt.spectral_efficiency, pt.max_bit_rate, pt.limiting_Ts, pt.feasible))
    cols = ["scheme", "bias_db", "kind", "M", "spectral_efficiency", "max_bit_rate", "limiting_Ts", "feasible"]
    return cols, rows


def cmd_pmf(args, cfg):
    spad = spad_from_config(cfg)
    ts = args.symbol_period if args.symbol_period is not None else _number(cfg, "symbol_period_s")
    kind = args.kind or cfg["dead_time_kind"]
    if (args.mu is None) == (args.incident is None):
        raise ConfigError("give exactly one of --mu or --incident", key="mu")
    mu = float(args.mu) if args.mu is not None else float(potential_counts_from_incident(args.incident, spad, ts))
    if mu < 0:
        raise ConfigError("--mu must be non-negative", key="mu")
    rng = np.random.default_rng(_seed(args, cfg))
    rate = mu / (ts * spad.n_spad)
    if mu == 0:
        return ["count", "p_exact", "p_poisson", "p_empirical"], [(0, 1.0, 1.0, 1.0)]
    device = single_device_pmf(kind, rate, spad, ts)
    exact = array_pmf(device, spad.n_spad)
    poisson = CountDistribution.poisson(float(dead_time_mean_transfer(mu, kind, spad, ts)))
    empirical = empirical_array_distribution(kind, rate, spad, ts, rng, args.samples, args.oracle_trials)
    lo = min(exact.offset, poisson.offset, empirical.offset)
    hi = max(exact.max_count, poisson.max_count, empirical.max_count)
    k = np.arange(lo, hi + 1)
    rows = list(zip(k.tolist(), np.atleast_1d(exact.prob(k)), np.atleast_1d(poisson.prob(k)),
                    np.atleast_1d(empirical.prob(k))))
    return ["count", "p_exact", "p_poisson", "p_empirical"], rows


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
    "maxrate": cmd_maxrate,
    "pmf": cmd_pmf,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="YAML scenario file")
    common.add_argument("--seed", type=int, help="random seed (overrides the file)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--out", help="output path (default: stdout)")

    parser = argparse.ArgumentParser(prog="spadofdm", description="SPAD-received optical OFDM link analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("analyze", "analytic BER curves (Poisson and exact shot noise)"),
                            ("simulate", "Monte Carlo BER curve")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--power", help="start:stop:step in dBm (inclusive)")
    sub.add_parser("metrics", parents=[common], help="MPR, MOI and LEA over the scenario grid")
    sub.add_parser("maxrate", parents=[common], help="maximum bit rate over the scenario grid")
    p = sub.add_parser("pmf", parents=[common], help="array count distribution: exact, Poisson, empirical")
    p.add_argument("--kind", choices=("PQ", "AQ"), type=str.upper)
    p.add_argument("--mu", type=float, help="expected potential array counts per symbol")
    p.add_argument("--incident", type=float, help="photons incident on the array per symbol")
    p.add_argument("--symbol-period", type=float, dest="symbol_period", help="seconds")
    p.add_argument("--samples", type=int, default=100_000, help="empirical array samples")
    p.add_argument("--oracle-trials", type=int, default=1_000_000, dest="oracle_trials",
                   help="event-level single-device trials behind the empirical column")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.scenario)
        columns, rows = COMMANDS[args.command](args, cfg)
        text = render_table(columns, rows, _metadata(args, cfg), args.format)
    except ConfigError as exc:
        print(f"spadofdm: configuration error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalInstabilityError, SupportOverflowError) as exc:
        print(f"spadofdm: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
