"""Command-line front end.

    lidar-ar adop-scan     --preset fig4a --out results/
    lidar-ar ratio-curve   --preset fig2a
    lidar-ar success-grid  --preset fig6c --set lidar.trials=20
    lidar-ar simulate      --preset l1_lidar --seed 7 --dump-bundle
    lidar-ar solve-epoch   bundle.json

Settings come from (lowest to highest priority) built-in defaults, a named
preset, an INI config file with sections ``[gnss]``, ``[lidar]`` and
``[run]``, then ``--set section.key=value`` overrides.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from lidar_ar import adop as adop_mod
from lidar_ar import sim
from lidar_ar.ambiguity import DEFAULT_THRESHOLD, bootstrapped_success_rate, resolve
from lidar_ar.errors import ArgumentError, ConfigError, DegenerateGeometryError, LidarArError, NumericalError
from lidar_ar.fusion import epoch_from_bundle, epoch_to_bundle, load_bundle, solve_float
from lidar_ar.gnss_model import GnssConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

SWEEP_HEADER = [
    "m", "f", "n", "sigma_p", "sigma_phi", "sigma_L",
    "adop_g", "adop_gl", "ratio", "gamma1", "gamma2", "gamma3", "ps",
]
RATIO_HEADER = [
    "m", "f", "n", "sigma_p", "sigma_phi", "sigma_L",
    "ratio", "ratio_det", "approx1", "approx2", "approx3", "gamma1", "gamma2", "gamma3",
]
EPOCH_HEADER = ["epoch", "e_err", "n_err", "u_err", "fixed", "correct", "ps", "adop", "m", "n"]

DEFAULTS = {
    "gnss": {
        "f": "1",
        "sigma_p": "0.2",
        "sigma_phi": "0.002",
        "wavelengths": "normalized",
        "equal_weights": "false",
        "m": "6",
        "m_min": "2",
        "m_max": "12",
        "sky": "reference",
        "mask_deg": "40",
    },
    "lidar": {
        "n": "44",
        "sigma_L": "0.15",
        "sigma_min": "0.05",
        "sigma_max": "0.84",
        "sigma_step": "0.01",
        "trials": "100",
        "outlier_fraction": "0",
        "annulus_min": "5",
        "annulus_max": "50",
        "height": "2",
    },
    "run": {
        "seed": "0",
        "epochs": "1000",
        "threshold": str(DEFAULT_THRESHOLD),
        "full_ar": "false",
        "noise": "true",
    },
}

PRESETS = {
    "fig2a": {"gnss": {"f": "1", "sigma_p": "0.2", "equal_weights": "true", "m_max": "15"},
              "lidar": {"n": "44", "sigma_L": "0.15", "trials": "20"}},
    "fig2b": {"gnss": {"f": "1", "sigma_p": "0.2", "equal_weights": "true", "m_max": "15"},
              "lidar": {"n": "44", "sigma_L": "0.84", "trials": "20"}},
    "fig4a": {"gnss": {"f": "1, 2", "sigma_p": "0.2", "equal_weights": "true", "m_max": "15"},
              "lidar": {"n": "0, 44", "sigma_L": "0.15", "trials": "5"}},
    "fig4b": {"gnss": {"f": "1, 2", "sigma_p": "0.6", "equal_weights": "true", "m_max": "15"},
              "lidar": {"n": "0, 44", "sigma_L": "0.84", "trials": "5"}},
    "fig6a": {"gnss": {"f": "1", "sigma_p": "0.2"}, "lidar": {"n": "4"}},
    "fig6b": {"gnss": {"f": "2", "sigma_p": "0.2"}, "lidar": {"n": "4"}},
    "fig6c": {"gnss": {"f": "1", "sigma_p": "0.2"}, "lidar": {"n": "44"}},
    "l1_lidar": {"gnss": {"f": "1", "m": "6", "wavelengths": "gps"},
                 "lidar": {"n": "44", "sigma_L": "0.15"},
                 "run": {"epochs": "1000"}},
    "l1_only_far": {"gnss": {"f": "1", "m": "5", "wavelengths": "gps"},
                    "lidar": {"n": "0"},
                    "run": {"epochs": "1000", "full_ar": "true"}},
}

# command each preset is meant for (used only for the README table and tests)
PRESET_COMMANDS = {
    "fig2a": "ratio-curve", "fig2b": "ratio-curve",
    "fig4a": "adop-scan", "fig4b": "adop-scan",
    "fig6a": "success-grid", "fig6b": "success-grid", "fig6c": "success-grid",
    "l1_lidar": "simulate", "l1_only_far": "simulate",
}


# -- settings -------------------------------------------------------------------


class Settings:
    """Typed access to the merged configuration."""

    def __init__(self, parser: configparser.ConfigParser):
        self.cp = parser

    def _raw(self, section: str, key: str) -> str:
        try:
            return self.cp.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError) as exc:
            raise ConfigError(f"missing setting {section}.{key}") from exc

    def get_float(self, section, key) -> float:
        raw = self._raw(section, key)
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: expected a number, got {raw!r}") from exc

    def get_int(self, section, key) -> int:
        raw = self._raw(section, key)
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: expected an integer, got {raw!r}") from exc

    def get_bool(self, section, key) -> bool:
        raw = self._raw(section, key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected true/false, got {raw!r}")

    def get_str(self, section, key) -> str:
        return self._raw(section, key).strip()

    def get_list(self, section, key, kind=float) -> list:
        raw = self._raw(section, key)
        items = [s.strip() for s in raw.split(",") if s.strip()]
        try:
            return [kind(s) for s in items]
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: bad list entry in {raw!r}") from exc


def build_settings(preset: str | None, config_path: str | None, overrides: list[str], seed: int | None) -> Settings:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case (sigma_L)
    cp.read_dict(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        cp.read_dict(PRESETS[preset])
    if config_path is not None:
        path = Path(config_path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            user = configparser.ConfigParser(interpolation=None)
            user.optionxform = str
            user.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        for section in user.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}] (expected gnss, lidar, run)")
            for key, value in user.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
                cp.set(section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"--set: unknown setting {lhs!r}")
        cp.set(section, key, value)
    if seed is not None:
        cp.set("run", "seed", str(seed))
    return Settings(cp)


def _gnss_config(s: Settings, f: int, sigma_p: float) -> GnssConfig:
    sigma_phi = s.get_float("gnss", "sigma_phi")
    mode = s.get_str("gnss", "wavelengths")
    try:
        if mode == "normalized":
            return GnssConfig.normalized(f, sigma_p, sigma_phi)
        if mode == "gps":
            return GnssConfig.gps(f, sigma_p, sigma_phi)
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"gnss.wavelengths must be 'normalized' or 'gps', got {mode!r}")


def _m_range(s: Settings) -> range:
    lo, hi = s.get_int("gnss", "m_min"), s.get_int("gnss", "m_max")
    top = len(sim.HIGH_ELEVATION_SKY)
    if not 2 <= lo <= hi <= top:
        raise ConfigError(f"need 2 <= gnss.m_min <= gnss.m_max <= {top}")
    return range(lo, hi + 1)


def _sigma_grid(s: Settings) -> list[float]:
    lo, hi, step = (s.get_float("lidar", k) for k in ("sigma_min", "sigma_max", "sigma_step"))
    if not (0 < lo <= hi and step > 0):
        raise ConfigError("need 0 < lidar.sigma_min <= lidar.sigma_max and lidar.sigma_step > 0")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(count)]


def _trials(s: Settings) -> int:
    t = s.get_int("lidar", "trials")
    if t < 1:
        raise ConfigError("lidar.trials must be >= 1")
    return t


def _layout_kwargs(s: Settings) -> dict:
    a0, a1 = s.get_float("lidar", "annulus_min"), s.get_float("lidar", "annulus_max")
    if not 0 <= a0 < a1:
        raise ConfigError("need 0 <= lidar.annulus_min < lidar.annulus_max")
    return {"annulus": (a0, a1), "height": s.get_float("lidar", "height")}


def _nonempty(values: list, name: str) -> list:
    if not values:
        raise ConfigError(f"{name} lists no variants")
    return values


# -- output helpers -----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(doc), indent=2, allow_nan=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


# -- commands -----------------------------------------------------------------------


def _sweep_row(r: sim.SweepRow) -> list:
    return [r.m, r.f, r.n, r.sigma_p, r.sigma_phi, r.sigma_L, r.adop_g, r.adop_gl, r.ratio, *r.gammas, r.ps]


def cmd_adop_scan(s: Settings, out: Path) -> Path:
    """ADOP^G / ADOP^GL and bootstrapped success rates against m."""
    fs = _nonempty(s.get_list("gnss", "f", int), "gnss.f")
    sps = _nonempty(s.get_list("gnss", "sigma_p"), "gnss.sigma_p")
    ns = _nonempty(s.get_list("lidar", "n", int), "lidar.n")
    sigma_L = s.get_float("lidar", "sigma_L")
    trials, seed = _trials(s), s.get_int("run", "seed")
    eq = s.get_bool("gnss", "equal_weights")
    layout = _layout_kwargs(s)
    nan = float("nan")
    rows = []
    for n in ns:
        if n and n < 4:
            raise ConfigError("lidar.n entries must be 0 or >= 4")
        for f in fs:
            for sp in sps:
                cfg = _gnss_config(s, f, sp)
                for m in _m_range(s):
                    geo = sim.reference_constellation(m, equal_weights=eq)
                    adop_g = adop_mod.adop_gnss_closed_form(cfg, geo)
                    if n:
                        info = sim.lidar_information_trials(n, trials, sim.cell_rng(seed, n, m), **layout)
                        r = sim.lidar_aided_cell(cfg, geo, info, sigma_L, n, ps="bootstrap")
                        rows.append(_sweep_row(r))
                        continue
                    ps = nan
                    if m >= 4:
                        try:
                            Q_bb = adop_mod.gnss_position_variance(cfg, geo)
                            ps = bootstrapped_success_rate(adop_mod.ambiguity_variance(cfg, geo, Q_bb))
                        except DegenerateGeometryError:
                            ps = nan
                    rows.append([m, f, 0, sp, cfg.sigma_phi, nan, adop_g, nan, 1.0, nan, nan, nan, ps])
    path = out / "adop_scan.csv"
    write_csv(path, SWEEP_HEADER, rows)
    return path


def cmd_ratio_curve(s: Settings, out: Path) -> Path:
    """Exact ADOP-ratio and its three single-eigenvalue approximations against m."""
    f = s.get_list("gnss", "f", int)
    sps = s.get_list("gnss", "sigma_p")
    if len(f) != 1 or len(sps) != 1:
        raise ConfigError("ratio-curve takes a single gnss.f and gnss.sigma_p")
    n = s.get_int("lidar", "n")
    if n < 4:
        raise ConfigError("ratio-curve needs lidar.n >= 4")
    sigma_L = s.get_float("lidar", "sigma_L")
    trials, seed = _trials(s), s.get_int("run", "seed")
    eq = s.get_bool("gnss", "equal_weights")
    layout = _layout_kwargs(s)
    cfg = _gnss_config(s, f[0], sps[0])
    rows = []
    for m in _m_range(s):
        geo = sim.reference_constellation(m, equal_weights=eq)
        rng = sim.cell_rng(seed, n, m)
        acc = []
        for _ in range(trials):
            pts = sim.sample_keypoint_layout(n, rng, **layout)
            rr = adop_mod.adop_ratio(adop_mod.AnalysisScenario(cfg, geo, pts, sigma_L))
            acc.append([rr.exact, rr.determinant_form, *rr.approximations, *rr.eigenvalues])
        mean = np.mean(np.array(acc), axis=0)
        rows.append([m, cfg.f, n, cfg.sigma_p, cfg.sigma_phi, sigma_L, *mean])
    path = out / "ratio_curve.csv"
    write_csv(path, RATIO_HEADER, rows)
    return path


def cmd_success_grid(s: Settings, out: Path) -> Path:
    """Trial-averaged ADOP^GL over the (m, sigma_L) grid."""
    f = s.get_list("gnss", "f", int)
    sps = s.get_list("gnss", "sigma_p")
    if len(f) != 1 or len(sps) != 1:
        raise ConfigError("success-grid takes a single gnss.f and gnss.sigma_p")
    n = s.get_int("lidar", "n")
    if n < 4:
        raise ConfigError("success-grid needs lidar.n >= 4")
    cfg = _gnss_config(s, f[0], sps[0])
    layout = _layout_kwargs(s)
    rows = []
    seed, trials = s.get_int("run", "seed"), _trials(s)
    eq = s.get_bool("gnss", "equal_weights")
    for m in _m_range(s):
        geo = sim.reference_constellation(m, equal_weights=eq)
        for j, sigma in enumerate(_sigma_grid(s)):
            info = sim.lidar_information_trials(n, trials, sim.cell_rng(seed, m, j), **layout)
            rows.append(_sweep_row(sim.lidar_aided_cell(cfg, geo, info, sigma, n)))
    path = out / "success_grid.csv"
    write_csv(path, SWEEP_HEADER, rows)
    return path


def scenario_from_settings(s: Settings) -> sim.ScenarioSpec:
    f = s.get_list("gnss", "f", int)
    sps = s.get_list("gnss", "sigma_p")
    if len(f) != 1 or len(sps) != 1:
        raise ConfigError("simulate takes a single gnss.f and gnss.sigma_p")
    sky = s.get_str("gnss", "sky")
    if sky not in ("reference", "random"):
        raise ConfigError("gnss.sky must be 'reference' or 'random'")
    layout = _layout_kwargs(s)
    epochs = s.get_int("run", "epochs")
    if epochs < 1:
        raise ConfigError("run.epochs must be >= 1")
    noise = s.get_bool("run", "noise")
    return sim.ScenarioSpec(
        m=s.get_int("gnss", "m"),
        f=f[0],
        sigma_p=sps[0],
        sigma_phi=s.get_float("gnss", "sigma_phi"),
        sigma_L=s.get_float("lidar", "sigma_L"),
        n_keypoints=s.get_int("lidar", "n"),
        outlier_fraction=s.get_float("lidar", "outlier_fraction"),
        epochs=epochs,
        seed=s.get_int("run", "seed"),
        threshold=s.get_float("run", "threshold"),
        full_ar=s.get_bool("run", "full_ar"),
        wavelengths=s.get_str("gnss", "wavelengths"),
        random_sky=sky == "random",
        mask_deg=s.get_float("gnss", "mask_deg"),
        equal_weights=s.get_bool("gnss", "equal_weights"),
        annulus=layout["annulus"],
        keypoint_height=layout["height"],
        noise=noise,
    )


def cmd_simulate(s: Settings, out: Path, dump_bundle: bool = False) -> list[Path]:
    spec = scenario_from_settings(s)
    simulator = sim.EpochSimulator(spec)
    results = [simulator.run_epoch(e) for e in range(spec.epochs)]
    summary = sim.summarize(results)
    rows = []
    for r in results:
        e = r.solution_error
        rows.append([r.epoch, e[0], e[1], e[2], r.accepted, r.correct, r.ps, r.adop, r.m, r.n_keypoints])
    paths = [out / "epochs.csv", out / "summary.json"]
    write_csv(paths[0], EPOCH_HEADER, rows)
    write_json(paths[1], summary.to_dict())
    if dump_bundle:
        gnss, lidar, truth, _ = simulator.make_epoch(0)
        extra = {
            "truth": {"position": truth["position"], "ambiguities": truth["ambiguities"]},
            "options": {"threshold": spec.threshold, "full_ar": spec.full_ar},
        }
        doc = epoch_to_bundle(gnss, lidar, enu_to_frame=simulator.enu.T, extra=extra)
        paths.append(out / "bundle.json")
        write_json(paths[-1], doc)
    return paths


def cmd_solve_epoch(bundle_path: str, out: Path | None, threshold: float | None = None) -> dict:
    doc = load_bundle(bundle_path)
    gnss, lidar = epoch_from_bundle(doc)
    opts = doc.get("options") or {}
    thr = threshold if threshold is not None else float(opts.get("threshold", DEFAULT_THRESHOLD))
    full_ar = bool(opts.get("full_ar", False))
    sol = solve_float(gnss, lidar)
    result = {"float": sol.to_dict()}
    if gnss is not None:
        outcome = resolve(sol.ambiguity_problem(), thr, full_ar)
        result["ambiguity"] = {
            "fixed_integers": outcome.fixed_integers.tolist(),
            "success_rate": outcome.formal_success_rate,
            "accepted": outcome.accepted,
            "squared_norms": outcome.squared_norms.tolist(),
            "fixed_position": None if outcome.fixed_position is None else outcome.fixed_position.tolist(),
        }
    result["adop"] = adop_mod.adop(sol.Q_aa) if sol.layout.n_amb else None
    if out is not None:
        write_json(out / "solution.json", result)
    return result


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [gnss], [lidar], [run] sections")
    common.add_argument("--preset", help=f"named parameter set: {', '.join(PRESETS)}")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")

    p = argparse.ArgumentParser(prog="lidar-ar", description="Lidar-aided GNSS ambiguity resolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("adop-scan", parents=[common], help="ADOP and success rate against m")
    sub.add_parser("ratio-curve", parents=[common], help="ADOP-ratio and approximations against m")
    sub.add_parser("success-grid", parents=[common], help="ADOP^GL over (m, sigma_L)")
    sp = sub.add_parser("simulate", parents=[common], help="Monte-Carlo positioning run")
    sp.add_argument("--dump-bundle", action="store_true", help="also write the first epoch as bundle.json")
    se = sub.add_parser("solve-epoch", parents=[common], help="solve one epoch bundle (JSON)")
    se.add_argument("bundle")
    se.add_argument("--threshold", type=float, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "solve-epoch":
            result = cmd_solve_epoch(args.bundle, out, args.threshold)
            print(json.dumps(_jsonable(result), indent=2))
            return EXIT_OK
        s = build_settings(args.preset, args.config, args.overrides, args.seed)
        if args.command == "adop-scan":
            paths = [cmd_adop_scan(s, out)]
        elif args.command == "ratio-curve":
            paths = [cmd_ratio_curve(s, out)]
        elif args.command == "success-grid":
            paths = [cmd_success_grid(s, out)]
        else:
            paths = cmd_simulate(s, out, args.dump_bundle)
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LidarArError as exc:  # pragma: no cover - every subclass is handled above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
