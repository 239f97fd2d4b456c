"""Command-line driver: dataset generation, training, evaluation, selftest,
benchmarks, and parameter accounting.

Configuration is a flat ``section.key = value`` text file layered over
profile defaults; command-line flags win over the file.  Every artifact
embeds the tool version, the hash of the merged configuration, and the seed.
Exit codes: 0 ok, 2 configuration error, 3 runtime failure, 4 failed checks.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from chanest import __version__
from chanest import eval as ev
from chanest import mambanet as mnet
from chanest import selftest
from chanest import training as trn
from chanest.baseband import BasebandConfig
from chanest.channel import PowerDelayProfile, builtin_pdp

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4


class ConfigError(ValueError):
    pass


# one flat string-valued view; parsing/validation happens when objects are built
DEFAULTS: dict[str, str] = {
    "baseband.n_f": "228",
    "baseband.n_s": "14",
    "baseband.l_cp": "12",
    "baseband.l_s": "4",
    "baseband.pilot_symbols": "2,5,8,11",
    "baseband.pilot_offset": "1",
    "baseband.f_space": "15e3",
    "baseband.f_r": "5e9",
    "baseband.pilot_value": "0.7071067811865476+0.7071067811865476j",
    "pdp.name": "etu",
    "pdp.delays_ns": "",
    "pdp.powers_db": "",
    "model.c_spread": "24",
    "model.n_res_blocks": "7",
    "model.cnn_channels": "12",
    "model.head_kernel": "96x5",
    "model.body_kernel": "5x5",
    "model.eps": "1e-5",
    "model.token_order": "symbol_major",
    "train.samples": "125000",
    "train.max_epochs": "100",
    "train.initial_lr": "5e-4",
    "train.lr_drop_period": "25",
    "train.lr_drop_factor": "0.5",
    "train.minibatch": "128",
    "train.l2": "1e-7",
    "train.huber_delta": "1.0",
    "train.val_fraction": "0.05",
    "train.snr_lo": "5",
    "train.snr_hi": "25",
    "train.fd_lo": "0",
    "train.fd_hi": "97",
    "eval.snr_list": "5,10,15,20,25,30",
    "eval.n_trials": "5000",
    "eval.fd_lo": "0",
    "eval.fd_hi": "97",
    "eval.estimators": "ls,mmse",
    "eval.ber": "true",
    "eval.chunk": "500",
    "bench.lengths": "256,512,1024,2048,4096,8192,16384",
    "bench.reps": "5",
    "bench.width": "24",
}

#: desk profile: reduced subcarrier count and training budget so a full
#: generate/train/evaluate cycle completes on a laptop
PROFILES: dict[str, dict[str, str]] = {
    "paper": {},
    "desk": {
        "baseband.n_f": "48",
        "train.samples": "10000",
        "train.max_epochs": "20",
        "eval.snr_list": "5,15,25",
        "eval.n_trials": "1000",
    },
}


def load_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
        values[key] = value
    return values


def merge_config(profile: str, file_values: dict[str, str]) -> dict[str, str]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (expected desk or paper)")
    merged = dict(DEFAULTS)
    merged.update(PROFILES[profile])
    for key in file_values:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
    merged.update(file_values)
    return merged


def config_hash(flat: dict[str, str]) -> str:
    text = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _parse(flat: dict[str, str], key: str, kind, extra=""):
    raw = flat[key]
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key} = {raw!r}: {extra or 'cannot parse value'}") from None


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.split(",") if v.strip())


def _kernel(raw: str) -> tuple[int, int]:
    a, b = raw.lower().split("x")
    return int(a), int(b)


def _bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ValueError(raw)


def make_baseband(flat: dict[str, str]) -> BasebandConfig:
    try:
        return BasebandConfig(
            n_f=_parse(flat, "baseband.n_f", int),
            n_s=_parse(flat, "baseband.n_s", int),
            l_cp=_parse(flat, "baseband.l_cp", int),
            l_s=_parse(flat, "baseband.l_s", int),
            pilot_symbols=_parse(flat, "baseband.pilot_symbols", _int_list),
            pilot_offset=_parse(flat, "baseband.pilot_offset", int),
            f_space=_parse(flat, "baseband.f_space", float),
            f_r=_parse(flat, "baseband.f_r", float),
            pilot_value=_parse(flat, "baseband.pilot_value", complex),
        )
    except ValueError as exc:
        raise ConfigError(f"baseband configuration invalid: {exc}") from None


def make_pdp(flat: dict[str, str]) -> PowerDelayProfile:
    name = flat["pdp.name"]
    delays = _parse(flat, "pdp.delays_ns", _float_list)
    powers = _parse(flat, "pdp.powers_db", _float_list)
    if delays or powers:
        if not (delays and powers):
            raise ConfigError("pdp.delays_ns and pdp.powers_db must be given together")
        try:
            return PowerDelayProfile(name or "custom", delays, powers)
        except ValueError as exc:
            raise ConfigError(f"pdp configuration invalid: {exc}") from None
    try:
        return builtin_pdp(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def make_model(flat: dict[str, str], bb: BasebandConfig) -> mnet.MambaNetConfig:
    try:
        return mnet.MambaNetConfig.from_baseband(
            bb,
            c_spread=_parse(flat, "model.c_spread", int),
            n_res_blocks=_parse(flat, "model.n_res_blocks", int),
            cnn_channels=_parse(flat, "model.cnn_channels", int),
            head_kernel=_parse(flat, "model.head_kernel", _kernel, "expected e.g. 96x5"),
            body_kernel=_parse(flat, "model.body_kernel", _kernel, "expected e.g. 5x5"),
            eps=_parse(flat, "model.eps", float),
            token_order=flat["model.token_order"],
        )
    except ValueError as exc:
        raise ConfigError(f"model configuration invalid: {exc}") from None


def make_train_config(flat: dict[str, str], seed: int) -> trn.TrainConfig:
    try:
        return trn.TrainConfig(
            initial_lr=_parse(flat, "train.initial_lr", float),
            lr_drop_period=_parse(flat, "train.lr_drop_period", int),
            lr_drop_factor=_parse(flat, "train.lr_drop_factor", float),
            max_epochs=_parse(flat, "train.max_epochs", int),
            minibatch=_parse(flat, "train.minibatch", int),
            l2=_parse(flat, "train.l2", float),
            huber_delta=_parse(flat, "train.huber_delta", float),
            val_fraction=_parse(flat, "train.val_fraction", float),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"training configuration invalid: {exc}") from None


def _artifact_line(flat: dict[str, str], seed: int) -> str:
    return f"chanest v{__version__} config={config_hash(flat)} seed={seed}"


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _common_header(flat, seed) -> dict:
    return {"tool": f"chanest v{__version__}", "config_hash": config_hash(flat), "seed": seed}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, flat) -> int:
    bb = make_baseband(flat)
    pdp = make_pdp(flat)
    n = _parse(flat, "train.samples", int)
    ds = trn.generate_dataset(
        n,
        (_parse(flat, "train.snr_lo", float), _parse(flat, "train.snr_hi", float)),
        (_parse(flat, "train.fd_lo", float), _parse(flat, "train.fd_hi", float)),
        bb,
        pdp,
        seed=args.seed,
        val_fraction=_parse(flat, "train.val_fraction", float),
        workers=args.workers,
    )
    out = _out_dir(args) / "dataset.bin"
    trn.save_dataset(out, ds, extra_header=_common_header(flat, args.seed))
    print(f"wrote {out} ({ds.n} samples, {ds.n_train} train / {ds.n - ds.n_train} val)")
    return EXIT_OK


def cmd_train(args, flat) -> int:
    bb = make_baseband(flat)
    pdp = make_pdp(flat)
    mcfg = make_model(flat, bb)
    tcfg = make_train_config(flat, args.seed)
    if args.data:
        ds = trn.load_dataset(args.data)
    else:
        print("no --data given; generating the dataset from the configuration")
        ds = trn.generate_dataset(
            _parse(flat, "train.samples", int),
            (_parse(flat, "train.snr_lo", float), _parse(flat, "train.snr_hi", float)),
            (_parse(flat, "train.fd_lo", float), _parse(flat, "train.fd_hi", float)),
            bb,
            pdp,
            seed=args.seed,
            val_fraction=tcfg.val_fraction,
            workers=args.workers,
        )
    params = mnet.init_mambanet(mcfg, np.random.default_rng(args.seed))
    log = print if not args.quiet else None
    result = trn.train(params, mcfg, ds, tcfg, log=log)
    out = _out_dir(args)
    params.load_state(result.best_state)
    header = _common_header(flat, args.seed)
    header["best_epoch"] = result.best_epoch
    header["best_val_loss"] = result.best_val_loss
    mnet.save_checkpoint(out / "checkpoint.bin", params, mcfg, extra=header)
    trn.write_history_csv(out / "history.csv", result.history, _artifact_line(flat, args.seed))
    print(f"wrote {out / 'checkpoint.bin'} (best epoch {result.best_epoch}, "
          f"val {result.best_val_loss:.6f}) and {out / 'history.csv'}")
    return EXIT_OK


def cmd_eval(args, flat) -> int:
    bb = make_baseband(flat)
    pdp = make_pdp(flat)
    names = [n.stripdose() if False else n.strip() for n in flat["eval.estimators"].split(",") if n.strip()]
    specs = []
    for name in names:
        if name in ("ls", "mmse", "perfect"):
            specs.append(ev.EstimatorSpec(name, name))
        elif name == "mambanet":
            if not args.checkpoint:
                raise ConfigError("estimator 'mambanet' requires --checkpoint")
            specs.append(ev.EstimatorSpec(name, "mambanet", checkpoint=args.checkpoint))
        else:
            raise ConfigError(f"unknown estimator {name!r} in eval.estimators")
    if not specs:
        raise ConfigError("eval.estimators selected no estimators")
    report = ev.monte_carlo_sweep(
        specs,
        _parse(flat, "eval.snr_list", _float_list),
        _parse(flat, "eval.n_trials", int),
        bb,
        pdp,
        fd_range=(_parse(flat, "eval.fd_lo", float), _parse(flat, "eval.fd_hi", float)),
        seed=args.seed,
        compute_ber=_parse(flat, "eval.ber", _bool),
        chunk=_parse(flat, "eval.chunk", int),
    )
    report.meta["config"] = config_hash(flat)
    report.meta["tool"] = f"chanest-v{__version__}"
    if args.checkpoint:
        report.meta["checkpoint"] = Path(args.checkpoint).name
    out = _out_dir(args)
    report.to_csv(out / "sweep.csv")
    (out / "sweep.txt").write_text(f"# {_artifact_line(flat, args.seed)}\n" + report.to_text() + "\n")
    print(report.to_text())
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.txt'}")
    return EXIT_OK


def cmd_selftest(args, flat) -> int:
    ok = selftest.run_all(log=print)
    print("selftest:", "all checks passed" if ok else "FAILURES above")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_bench_scan(args, flat) -> int:
    report = ev.bench_scan_scaling(
        lengths=_parse(flat, "bench.lengths", _int_list),
        reps=_parse(flat, "bench.reps", int),
        width=_parse(flat, "bench.width", int),
        seed=args.seed,
    )
    cols = [k for k in report.rows[0] if k != "L"]
    print("L        " + "".join(f"{c:>18}" for c in cols))
    for row in report.rows:
        print(f"{row['L']:<9}" + "".join(f"{row[c]:>18.3e}" for c in cols))
    for name, slope in report.slopes.items():
        print(f"slope {name}: {slope:.3f}")
    if args.out:
        report.meta["config"] = config_hash(flat)
        report.meta["seed"] = args.seed
        out = _out_dir(args) / "bench_scan.csv"
        report.to_csv(out)
        print(f"wrote {out}")
    return EXIT_OK


def cmd_count_params(args, flat) -> int:
    bb = make_baseband(flat)
    mcfg = make_model(flat, bb)
    params = mnet.init_mambanet(mcfg, np.random.default_rng(args.seed))
    total = mnet.count_parameters(params)
    print(f"total trainable parameters: {total} ({total / 1e6:.3f}M)")
    for group, count in sorted(mnet.parameter_breakdown(params).items()):
        print(f"  {group:<8} {count}")
    scaling = mnet.scaling_report(mcfg)
    print(f"attention projection subtotal: {int(scaling['attention_projection'])}")
    print(
        f"doubling n_f: projection x{scaling['ratio']:.4f} "
        f"(log2 slope {scaling['exponent']:.3f})"
    )
    print("design target band: 0.25M..0.45M (reference design point 0.35M)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chanest",
        description="OFDM channel-estimation workbench",
    )
    parser.add_argument("--version", action="version", version=f"chanest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--profile", default="paper", choices=sorted(PROFILES))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers for sample generation")

    p = sub.add_parser("gen-data", help="generate a training dataset")
    common(p, "out")

    p = sub.add_parser("train", help="train the estimator network")
    common(p, "out")
    p.add_argument("--data", help="dataset file from gen-data (default: generate)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")

    p = sub.add_parser("eval", help="Monte Carlo MSE/BER sweep over SNR")
    common(p, "out")
    p.add_argument("--checkpoint", help="trained checkpoint for the mambanet estimator")

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    common(p, "out")

    p = sub.add_parser("bench-scan", help="scan/attention scaling benchmark")
    common(p, None)

    p = sub.add_parser("count-params", help="parameter count and breakdown")
    common(p, "out")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
    "bench-scan": cmd_bench_scan,
    "count-params": cmd_count_params,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, matching our config-error code
        return int(exc.code or 0)
    try:
        file_values = load_config_file(args.config) if args.config else {}
        flat = merge_config(args.profile, file_values)
        return _COMMANDS[args.command](args, flat)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
