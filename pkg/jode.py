# jode.py
# Command line entry point for the joint detection/estimation experiments.
#
#   python3 jode.py calibrate --config conf/radar_2x2_desk.yaml --out thresholds.json
#   python3 jode.py sweep --config conf/radar_2x2_desk.yaml --out results/sweep.csv
#   python3 jode.py verify --quick

import argparse
import json
import math
import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from joint_detection import CalibrationError, ModelDomainError, NumericalError, \
    PreconditionError, CostKind, random_finite_model, lemma1_bruteforce, rescaling_oracle
from changepoint_model import ChangepointModel, identity_check, series_rows
from mimo_radar_model import RegionMode, default_scene, build_region_grid, compute_q, \
    steering_tensor, synthesize_r, draw_target, log_clr_radar, girsanov_average, \
    det_identity_check, quadratic_form_identity, random_psd, complex_normal, dump_q_rows
from mc_harness import ConfigError, load_config, build_model, run_calibration, run_sweep, \
    validate_calibration, simulate_batch, assign_verdicts, derive_stream, write_csv, \
    write_trials_csv, output_path, purpose_tag
from utils import set_verbosity, format_real, write_file, DISC_RADIUS, REFERENCE_GRID_POINTS


##############################################################################
# ARGUMENTS
##############################################################################


def _add_experiment_flags(parser):
    parser.add_argument("--config", type=str, required=True,
                        help="Experiment config file (key: value lines)")
    parser.add_argument("--seed", type=int, help="Base seed (64-bit)")
    parser.add_argument("--alpha", type=float, help="False alarm probability")
    parser.add_argument("--snr", type=float, help="Single SNR value in dB (radar)")
    parser.add_argument("--trials", type=int,
                        help="Trials per hypothesis for calibration and evaluation")
    parser.add_argument("--fractions", type=float, nargs="+",
                        help="Targets for the fraction of reliable estimates")
    parser.add_argument("--region", choices=["ellipse", "disc"],
                        help="Surveillance region construction (radar)")
    parser.add_argument("--profile", choices=["desk", "full"], help="Scale profile")
    parser.add_argument("--out", type=str, help="Output path")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="Log progress (-v info, -vv debug)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="jode.py",
        description="Joint detection and estimation experiments: threshold calibration, "
                    "radar and changepoint simulations, fraction sweeps and oracle checks.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    calibrate = subparsers.add_parser("calibrate", help="Calibrate thresholds, write JSON")
    _add_experiment_flags(calibrate)
    calibrate.add_argument("--validate", action="store_true",
                           help="Check the thresholds on fresh trials")

    radar = subparsers.add_parser("radar-sim", help="Per-trial radar results at one SNR")
    _add_experiment_flags(radar)
    radar.add_argument("--dump-q", type=str, help="Write the Q matrices of the grid to CSV")

    changepoint = subparsers.add_parser("changepoint-sim", help="Per-trial changepoint results")
    _add_experiment_flags(changepoint)
    changepoint.add_argument("--dump-series", type=str,
                             help="Write the first evaluation series to CSV")

    sweep = subparsers.add_parser("sweep", help="Fraction sweep, one CSV per SNR")
    _add_experiment_flags(sweep)

    verify = subparsers.add_parser("verify", help="Run the oracle checks")
    verify.add_argument("--quick", action="store_true", help="Reduced oracle sizes")
    verify.add_argument("--seed", type=int, default=2024, help="Base seed")
    verify.add_argument("-v", "--verbose", action="count", default=0,
                        help="Log progress (-v info, -vv debug)")
    return parser


def _overrides(args):
    overrides = {
        "seed": args.seed,
        "alpha": args.alpha,
        "snr_db": None if args.snr is None else [args.snr],
        "trials_calibration": args.trials,
        "trials_evaluation": args.trials,
        "fractions": args.fractions,
        "region": args.region,
        "profile": args.profile,
        "output": args.out,
    }
    return overrides


##############################################################################
# SUBCOMMANDS
##############################################################################


def cmd_calibrate(args, config):
    out = config.output or "thresholds.json"
    records, ok = [], True
    for snr_db in config.snr_values:
        model = build_model(config, snr_db)
        thresholds = run_calibration(config, model, snr_db)
        record = thresholds.to_record()
        record["snr_db"] = None if snr_db is None else format_real(snr_db)
        records.append(record)
        print(f"snr={snr_db} gamma_np={thresholds.gamma_np:.6g} "
              f"beta_np={thresholds.beta_np:.4g} glrt={thresholds.glrt_threshold:.6g}")
        if args.validate:
            for name, c in validate_calibration(config, model, thresholds, snr_db).items():
                ok &= c["ok"]
                print(f"  {'PASS' if c['ok'] else 'FAIL'} {name}: realized {c['realized']:.5g} "
                      f"target {c['target']:.5g} (se {c['se']:.3g})")
    print(f"Writing thresholds to JSON: {out}")
    text = json.dumps({"model": config.model_key, "thresholds": records}, indent=2)
    write_file(os.path.dirname(out) or ".", os.path.basename(out), [text, "\n"])
    return 0 if ok else 1


def _simulate(config, snr_db):
    model = build_model(config, snr_db)
    thresholds = run_calibration(config, model, snr_db)
    purpose = purpose_tag("evaluation", snr_db)
    h0 = simulate_batch(model, 0, range(config.trials_evaluation), config.seed, purpose)
    h1 = simulate_batch(model, 1, range(config.trials_evaluation), config.seed, purpose)
    assign_verdicts(h0 + h1, thresholds)
    p_fa = np.mean([r.verdicts["np"].detected for r in h0])
    p_d = np.mean([r.verdicts["np"].detected for r in h1])
    print(f"snr={snr_db} P_FA={p_fa:.5g} P_D={p_d:.5g} (alpha={config.alpha:g})")
    return model, h0 + h1, purpose


def cmd_radar_sim(args, config):
    if config.model != "radar":
        raise ConfigError("radar-sim needs model: radar")
    model, records, _ = _simulate(config, config.snr_values[0])
    out = config.output or "radar_trials.csv"
    print(f"Writing results to CSV: {out}")
    write_trials_csv(records, out)
    if args.dump_q:
        print(f"Writing Q matrices to CSV: {args.dump_q}")
        pd.DataFrame(dump_q_rows(model)).to_csv(args.dump_q, index=False, lineterminator="\n")
    return 0


def cmd_changepoint_sim(args, config):
    if config.model != "changepoint":
        raise ConfigError("changepoint-sim needs model: changepoint")
    model, records, purpose = _simulate(config, None)
    out = config.output or "changepoint_trials.csv"
    print(f"Writing results to CSV: {out}")
    write_trials_csv(records, out)
    if args.dump_series:
        rows = []
        for i in range(min(10, config.trials_evaluation)):
            series, _ = model.sample_h1(derive_stream(config.seed, i, f"{purpose}/h1"))
            rows += [dict(row, trial=i) for row in series_rows(series)]
        print(f"Writing series to CSV: {args.dump_series}")
        pd.DataFrame(rows).to_csv(args.dump_series, index=False, lineterminator="\n")
    return 0


def cmd_sweep(args, config):
    base = config.output or "sweep.csv"
    snr_values = config.snr_values
    for snr_db in snr_values:
        model = build_model(config, snr_db)
        thresholds = run_calibration(config, model, snr_db)
        result, _ = run_sweep(config, model, thresholds, snr_db)
        for row in result.rows:
            mse = "n/a" if row.mse_normalized is None else f"{row.mse_normalized:.5g}"
            fraction = "" if row.fraction_target is None else f" fraction={row.fraction_target:g}"
            print(f"snr={snr_db} {row.scheme}{fraction} K={row.k} "
                  f"mse_normalized={mse} p_detect={row.p_detect:.5g}")
        path = output_path(base, snr_db, len(snr_values))
        print(f"Writing results to CSV: {path}")
        write_csv(result, path)
    return 0


def _report(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def cmd_verify(args):
    rng = np.random.default_rng(args.seed)
    quick = args.quick
    ok = True

    # estimator optimality on finite models
    failures = 0
    for i in range(10 if quick else 50):
        cost_kind = CostKind.MSE if i % 2 == 0 else CostKind.ZERO_ONE
        model = random_finite_model(rng, int(rng.integers(2, 6)), int(rng.integers(2, 7)),
                                    cost_kind)
        weighting = rng.uniform(size=model.n_observations)
        failures += not lemma1_bruteforce(model, weighting)["ok"]
    ok &= _report("bayes-estimator-brute-force", failures == 0, f"{failures} failures")

    worst = 0.0
    for _ in range(10 if quick else 30):
        model = random_finite_model(rng, 4, 6)
        delta1 = rng.uniform(0.5, 1.0, size=6)
        j, j_bar = rescaling_oracle(model, delta1, 1.0 - 0.8 * (delta1 @ model.marginal_h1()))
        worst = max(worst, abs(j - j_bar) / max(abs(j), 1e-300))
    ok &= _report("miss-constraint-rescaling", worst <= 1e-12, f"max relative gap {worst:.3g}")

    # likelihood ratio against the reflectivity average
    draws = 10 ** 5 if quick else 10 ** 6
    worst_z = 0.0
    for _ in range(10):
        scene = default_scene(int(rng.integers(1, 3)), 1, l_t=50)
        region = build_region_grid(scene, RegionMode.DISC, 30.0)
        target = draw_target(scene, region, rng)
        q = compute_q(scene, target.theta_o)
        r = synthesize_r(scene, steering_tensor(scene, target.theta_o), target, rng)[0]
        mean, se = girsanov_average(q[0], r[0], draws, rng)
        exact = math.exp(log_clr_radar(q, r))
        worst_z = max(worst_z, abs(mean - exact) / se if se > 0 else 0.0)
    ok &= _report("likelihood-ratio-average", worst_z <= 3.0, f"max |z| {worst_z:.3g}")

    worst = 0.0
    for m in range(1, 7):
        for _ in range(100):
            q = random_psd(rng, m)
            a, b = det_identity_check(q)
            c, d = quadratic_form_identity(q, complex_normal(rng, m))
            worst = max(worst, abs(a - b) / max(1.0, abs(a)), abs(c.real - d) / max(1.0, abs(d)),
                        abs(c.imag) / max(1.0, abs(c)))
    ok &= _report("determinant-quadratic-identities", worst <= 1e-9, f"max error {worst:.3g}")

    mismatches = identity_check(ChangepointModel(n_samples=16, mu=1.0),
                                10 ** 3 if quick else 10 ** 4, rng)
    ok &= _report("changepoint-closed-forms", not any(mismatches.values()), str(mismatches))

    scene = default_scene(2, 2)
    disc = build_region_grid(scene, RegionMode.DISC, 10.0, DISC_RADIUS).n_points
    ellipse = build_region_grid(scene, RegionMode.ELLIPSE_UNION, 10.0).n_points
    band = abs(ellipse - REFERENCE_GRID_POINTS) <= 0.1 * REFERENCE_GRID_POINTS
    ok &= _report("region-grid", disc == 177 and band, f"disc {disc}, ellipse {ellipse}")
    return 0 if ok else 1


COMMANDS = {
    "calibrate": cmd_calibrate,
    "radar-sim": cmd_radar_sim,
    "changepoint-sim": cmd_changepoint_sim,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    set_verbosity(args.verbose)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        config = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, config)
    except (ConfigError, CalibrationError, NumericalError, PreconditionError,
            ModelDomainError, OSError) as e:
        print(f"jode.py: error: {e}", file=sys.stderr)
        return 1


##############################################################################
# TESTS
##############################################################################


def test_missing_config_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["sweep"])
    assert e.value.code == 2


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit):
        main(["sweep", "--help"])
    text = capsys.readouterr().out
    for flag in ["--config", "--seed", "--alpha", "--snr", "--trials", "--fractions",
                 "--region", "--out", "--profile", "--verbose"]:
        assert flag in text
    with pytest.raises(SystemExit):
        main(["radar-sim", "--help"])
    assert "--dump-q" in capsys.readouterr().out


def test_bad_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("model: radar\nalpha: 2\n")
    assert main(["sweep", "--config", str(path)]) == 1
    assert "alpha" in capsys.readouterr().err


def test_sweep_is_deterministic(tmp_path):
    path = tmp_path / "cp.yaml"
    path.write_text("model: changepoint\nalpha: 0.05\ntrials_calibration: 500\n"
                    "trials_evaluation: 500\nfractions: [0.5, 1.0]\n")
    outputs = []
    for name in ["first.csv", "second.csv"]:
        out = tmp_path / name
        assert main(["sweep", "--config", str(path), "--seed", "7", "--out", str(out)]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_calibrate_writes_threshold_record(tmp_path):
    path = tmp_path / "cp.yaml"
    path.write_text("model: changepoint\nalpha: 0.1\ntrials_calibration: 400\n"
                    "trials_evaluation: 400\nfractions: [0.5, 1.0]\n")
    out = tmp_path / "thresholds.json"
    assert main(["calibrate", "--config", str(path), "--out", str(out)]) == 0
    record = json.loads(out.read_text())["thresholds"][0]
    assert record["reliability_lambdas"]["1"] == "inf"
    assert record["alpha"] == "0.10000000000000001"


def test_verify_quick_passes(capsys):
    assert main(["verify", "--quick"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def _run_script(*args):
    here = os.path.dirname(os.path.abspath(__file__))
    return subprocess.run([sys.executable, os.path.join(here, "jode.py"), *args],
                          cwd=here, capture_output=True, text=True)


def test_script_missing_config_exits_2():
    done = _run_script("sweep")
    assert done.returncode == 2
    assert "--config" in done.stderr


def test_script_bad_config_exits_1(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("model: radar\nm: 5\nn: 5\n")
    done = _run_script("calibrate", "--config", str(path))
    assert done.returncode == 1
    assert done.stderr.startswith("jode.py: error:")


def test_script_writes_sweep_csv(tmp_path):
    path = tmp_path / "cp.yaml"
    path.write_text("model: changepoint\nalpha: 0.1\ntrials_calibration: 300\n"
                    "trials_evaluation: 300\nfractions: [0.5, 1.0]\n")
    out = tmp_path / "sweep.csv"
    done = _run_script("sweep", "--config", str(path), "--out", str(out))
    assert done.returncode == 0, done.stderr
    assert f"Writing results to CSV: {out}" in done.stdout
    assert out.read_text().startswith("fraction_target,lambda,")


if __name__ == "__main__":
    sys.exit(main())
