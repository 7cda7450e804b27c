"""Command-line driver wiring the laboratory end to end.

Subcommands
-----------
``simulate``
    Render traced encryptions through the noisy channel and write the
    ground-truth traces, observation runs, and a manifest to a directory.
``attack-ttable``
    Two-round key recovery against a T-table style, inline or from a
    ``simulate`` output directory.
``attack-sbox``
    Last-round correlation attack against the compact S-box cipher.
``calibrate``
    Measure channel statistics over fresh synthetic pairs and compare
    them with the profile's published targets at +/-5 points.
``success-curve``
    Full-key recovery rate as a function of trace count, ordered and
    unordered variants.

Every command is deterministic given its flags and ``--seed``; output
files are plain text or CSV and each run directory carries a manifest
recording the seed and a digest of the noise profile, so identical
invocations produce byte-identical files.  Exit codes: 0 success, 2
recovery or calibration failed, 3 insufficient data, 4 configuration
error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .aes import Style, encrypt_traced, expand_key
from .lastround import (
    correlations_to_csv,
    ranking_report,
    recover_last_round_key,
)
from .noise import (
    NoiseProfile,
    measure_noise_statistics,
    noise_free,
    sbox_replay,
    table1_four_ttable,
    table1_large_ttable,
)
from .observe import (
    InsufficientDataError,
    ObservationRun,
    extract_observation,
    filter_noise,
    segment_rounds,
    synthesize_observations,
)
from .ttable import recover_key, run_recovery_trial, success_curve

__all__ = ["main", "ConfigError"]

_PRESETS = {
    "noise-free": noise_free,
    "table1-four-ttable": table1_four_ttable,
    "table1-large-ttable": table1_large_ttable,
    "sbox-replay": sbox_replay,
}

_DEFAULT_PROFILE = {
    Style.FOUR_TTABLE: "table1-four-ttable",
    Style.LARGE_TTABLE: "table1-large-ttable",
    Style.SBOX: "sbox-replay",
}


class ConfigError(Exception):
    """Invalid flags, missing files, or unparsable inputs."""


# ---------------------------------------------------------------------------
# config plumbing


def _parse_style(name):
    try:
        return Style(name)
    except ValueError:
        raise ConfigError(
            f"unknown style {name!r}; choose from {', '.join(s.value for s in Style)}"
        ) from None


def _load_profile(spec, style=None):
    if spec is None:
        spec = _DEFAULT_PROFILE[style] if style is not None else "noise-free"
    if spec in _PRESETS:
        return _PRESETS[spec]()
    path = Path(spec)
    if path.is_file():
        try:
            return NoiseProfile.from_text(path.read_text())
        except ValueError as exc:
            raise ConfigError(f"invalid profile file {spec}: {exc}") from None
    raise ConfigError(
        f"unknown profile {spec!r}; give a file path or one of {', '.join(sorted(_PRESETS))}"
    )


def _parse_counts(text):
    try:
        counts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"trace counts must be comma-separated integers, got {text!r}") from None
    if not counts or any(c < 1 for c in counts):
        raise ConfigError(f"trace counts must be positive, got {text!r}")
    return counts


def _parse_key(text):
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise ConfigError(f"key must be hex, got {text!r}") from None
    if len(key) != 16:
        raise ConfigError(f"key must be 16 bytes (32 hex digits), got {len(key)}")
    return key


def _manifest(command, fields):
    lines = ["# aesleak run manifest", f"command {command}"]
    lines += [f"{k} {v}" for k, v in fields]
    return "\n".join(lines) + "\n"


def _read_manifest(path):
    if not path.is_file():
        raise ConfigError(f"missing manifest: {path}")
    fields = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition(" ")
        fields[k] = v.strip()
    return fields


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _outdir(args):
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args):
    style = _parse_style(args.style)
    profile = _load_profile(args.profile, style)
    prefetch = args.prefetch == "per_round"
    out = _outdir(args)
    if out is None:
        raise ConfigError("simulate requires --out")
    rng = np.random.default_rng(args.seed)
    key = _parse_key(args.key) if args.key else bytes(rng.integers(0, 256, 16, dtype=np.uint8))

    blocks = ["index,plaintext,ciphertext"]
    for i in range(args.traces):
        pt = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
        ct, trace = encrypt_traced(key, pt, style, prefetch=prefetch)
        run = synthesize_observations(trace, profile, rng)
        blocks.append(f"{i},{pt.hex()},{ct.hex()}")
        _write(out / f"trace_{i:03d}.txt", trace.to_text())
        _write(out / f"obs_{i:03d}.csv", run.to_csv())
    _write(out / "blocks.csv", "\n".join(blocks) + "\n")
    _write(out / "key.txt", key.hex() + "\n")
    _write(out / "profile.txt", profile.to_text())
    _write(
        out / "manifest.txt",
        _manifest(
            "simulate",
            [
                ("style", style.value),
                ("prefetch", args.prefetch),
                ("traces", args.traces),
                ("seed", args.seed),
                ("profile_name", profile.name),
                ("profile_digest", profile.digest()),
            ],
        ),
    )
    print(f"simulate: wrote {args.traces} traced encryptions to {out} (style={style.value}, profile={profile.name})")
    return 0


# ---------------------------------------------------------------------------
# shared loading of simulate outputs


class _RunDir:
    def __init__(self, style, prefetch, profile, key, plaintexts, ciphertexts, runs):
        self.style = style
        self.prefetch = prefetch
        self.profile = profile
        self.key = key
        self.plaintexts = plaintexts
        self.ciphertexts = ciphertexts
        self.runs = runs


def _load_run_dir(path, max_traces=None):
    path = Path(path)
    man = _read_manifest(path / "manifest.txt")
    try:
        style = Style(man["style"])
        prefetch = man.get("prefetch", "none")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad manifest in {path}: {exc}") from None
    profile_path = path / "profile.txt"
    if not profile_path.is_file():
        raise ConfigError(f"missing profile.txt in {path}")
    profile = NoiseProfile.from_text(profile_path.read_text())
    key = None
    key_path = path / "key.txt"
    if key_path.is_file():
        key = _parse_key(key_path.read_text().strip())
    blocks_path = path / "blocks.csv"
    if not blocks_path.is_file():
        raise ConfigError(f"missing blocks.csv in {path}")
    pts, cts = [], []
    for line in blocks_path.read_text().splitlines()[1:]:
        if not line.strip():
            continue
        _, pt_hex, ct_hex = line.split(",")
        pts.append(bytes.fromhex(pt_hex))
        cts.append(bytes.fromhex(ct_hex))
    runs = []
    for obs_path in sorted(path.glob("obs_*.csv")):
        runs.append(ObservationRun.from_csv(obs_path.read_text()))
    if len(runs) != len(pts):
        raise ConfigError(f"{path}: {len(runs)} observation files but {len(pts)} blocks")
    if max_traces is not None:
        pts, cts, runs = pts[:max_traces], cts[:max_traces], runs[:max_traces]
    return _RunDir(style, prefetch, profile, key, pts, cts, runs)


# ---------------------------------------------------------------------------
# attack-ttable


def _curve_csv(style, variants_rows):
    lines = ["style,variant,traces,successes,trials,rate"]
    for variant, rows in variants_rows:
        for row in rows:
            lines.append(
                f"{style.value},{variant},{row['traces']},{row['successes']},"
                f"{row['trials']},{row['rate']:.4f}"
            )
    return "\n".join(lines) + "\n"


def _cmd_attack_ttable(args):
    out = _outdir(args)
    use_order = not args.unordered
    if args.indir:
        kit = _load_run_dir(args.indir, args.traces)
        style, profile = kit.style, kit.profile
        if style is Style.SBOX:
            raise ConfigError("attack-ttable needs a T-table style run; use attack-sbox")
        observations, skipped = [], []
        for i, (run, pt) in enumerate(zip(kit.runs, kit.plaintexts)):
            try:
                filtered = filter_noise(run, profile.context_switch)
                seg = segment_rounds(filtered, _layout_of(style), prefetch=kit.prefetch)
                observations.append(extract_observation(filtered, seg, pt))
            except Exception as exc:  # noqa: BLE001 - report and keep going
                skipped.append((i, str(exc)))
        result = recover_key(observations, style, profile, use_order=use_order, seed=args.seed)
        true_key = kit.key
        n_used = len(observations)
    else:
        if args.style is None:
            raise ConfigError("attack-ttable needs --in or --style")
        style = _parse_style(args.style)
        if style is Style.SBOX:
            raise ConfigError("attack-ttable needs a T-table style; use attack-sbox")
        profile = _load_profile(args.profile, style)
        rng = np.random.default_rng(args.seed)
        ok, result, true_key = run_recovery_trial(
            style,
            args.traces,
            profile,
            rng,
            use_order=use_order,
            prefetch=args.prefetch == "per_round",
        )
        skipped = []
        n_used = args.traces

    success = None if true_key is None else (result.key == true_key)
    lines = [
        "two-round key recovery report",
        f"style: {style.value}",
        f"profile: {profile.name} ({profile.digest()})",
        f"traces used: {n_used} (skipped: {len(skipped)})",
        f"window order used: {result.used_order}",
        f"recovered key: {result.key.hex()}",
        f"objective score: {result.score:.4f}",
        f"restart agreement: {result.restart_agreement:.2f}",
        f"low confidence: {result.low_confidence}",
    ]
    if true_key is not None:
        lines.append(f"true key: {true_key.hex()}")
        lines.append(f"success: {success}")
    for i, reason in skipped:
        lines.append(f"skipped trace {i}: {reason}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if out is not None:
        _write(out / "recovery_report.txt", report)
        _write(
            out / "manifest.txt",
            _manifest(
                "attack-ttable",
                [
                    ("style", style.value),
                    ("traces", n_used),
                    ("seed", args.seed),
                    ("ordered", str(use_order).lower()),
                    ("profile_name", profile.name),
                    ("profile_digest", profile.digest()),
                ],
            ),
        )
    if args.curve:
        counts = _parse_counts(args.curve)
        variants = (
            [("ordered", True), ("unordered", False)]
            if args.variant == "both"
            else [(args.variant, args.variant == "ordered")]
        )
        rows = [
            (
                name,
                success_curve(
                    style,
                    counts,
                    args.trials,
                    profile,
                    use_order=flag,
                    seed=[args.seed, vi],
                    jobs=args.jobs,
                ),
            )
            for vi, (name, flag) in enumerate(variants)
        ]
        csv = _curve_csv(style, rows)
        print(csv, end="")
        if out is not None:
            _write(out / "curve.csv", csv)
    if success is None:
        return 2 if result.low_confidence else 0
    return 0 if success else 2


def _layout_of(style):
    from .aes import TableLayout

    return TableLayout(style)


# ---------------------------------------------------------------------------
# attack-sbox


def _cmd_attack_sbox(args):
    out = _outdir(args)
    if args.indir:
        kit = _load_run_dir(args.indir, args.traces)
        if kit.style is not Style.SBOX:
            raise ConfigError("attack-sbox needs an sbox-style run; use attack-ttable")
        profile = kit.profile
        runs = [filter_noise(r, profile.context_switch) for r in kit.runs]
        cts = kit.ciphertexts
        true_key = kit.key
        known_pair = (kit.plaintexts[0], kit.ciphertexts[0]) if kit.plaintexts else None
        prefetch = kit.prefetch
    else:
        profile = _load_profile(args.profile, Style.SBOX)
        rng = np.random.default_rng(args.seed)
        true_key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
        runs, cts = [], []
        known_pair = None
        for _ in range(args.traces):
            pt = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
            ct, trace = encrypt_traced(true_key, pt, Style.SBOX)
            runs.append(synthesize_observations(trace, profile, rng))
            cts.append(ct)
            if known_pair is None:
                known_pair = (pt, ct)
        prefetch = "none"

    recovery = recover_last_round_key(
        runs,
        cts,
        mode=args.mode,
        known_pair=known_pair,
        prefetch=prefetch,
        bruteforce_limit=args.bruteforce_limit,
    )
    report = ranking_report(recovery)
    lines = [report.rstrip("\n")]
    if true_key is not None:
        true_k10 = expand_key(true_key)[10]
        ranks = [
            int(np.flatnonzero(recovery.rankings[p].ranking == int(true_k10[p]))[0])
            for p in range(16)
        ]
        correct = sum(r == 0 for r in ranks)
        lines.append("true round-10 key byte ranks: " + " ".join(str(r) for r in ranks))
        lines.append(f"rank-1 correct positions: {correct}/16 ({8 * correct} bits)")
        lines.append(f"master key recovered: {recovery.master_key == true_key}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if out is not None:
        _write(out / "sbox_report.txt", report)
        _write(out / "correlations.csv", correlations_to_csv(recovery.rankings))
        _write(
            out / "manifest.txt",
            _manifest(
                "attack-sbox",
                [
                    ("traces", len(runs)),
                    ("mode", args.mode),
                    ("seed", args.seed),
                    ("profile_name", profile.name),
                    ("profile_digest", profile.digest()),
                ],
            ),
        )
    if true_key is not None:
        return 0 if recovery.master_key == true_key else 2
    return 0 if recovery.master_key is not None else 2


# ---------------------------------------------------------------------------
# calibrate


def _cmd_calibrate(args):
    style = _parse_style(args.style)
    profile = _load_profile(args.profile, style)
    rng = np.random.default_rng(args.seed)
    pairs = []
    for _ in range(args.traces):
        key = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
        pt = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
        _, trace = encrypt_traced(key, pt, style)
        pairs.append((trace, synthesize_observations(trace, profile, rng)))
    stats = measure_noise_statistics(pairs)

    targets = {
        "true_positive_rate": profile.true_positive_rate,
        "false_positive_rate": profile.false_positive_rate,
        "false_negative_rate": profile.false_negative_rate,
        "ordered_fraction": profile.ordered_fraction,
    }
    lines = [
        "channel calibration report",
        f"style: {style.value}",
        f"profile: {profile.name} ({profile.digest()})",
        f"encryptions measured: {args.traces}",
        "metric                measured  target  diff  result",
    ]
    all_pass = True
    for name, target in targets.items():
        measured = 100.0 * stats.as_dict()[name]
        diff = abs(measured - 100.0 * target)
        ok = diff <= args.tolerance
        all_pass &= ok
        lines.append(
            f"{name:<20} {measured:8.1f} {100.0 * target:7.1f} {diff:5.1f}  "
            f"{'PASS' if ok else 'FAIL'}"
        )
    lines.append(f"calibration: {'PASS' if all_pass else 'FAIL'} (tolerance +/-{args.tolerance:g} points)")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    out = _outdir(args)
    if out is not None:
        _write(out / "calibration.txt", report)
        _write(
            out / "manifest.txt",
            _manifest(
                "calibrate",
                [
                    ("style", style.value),
                    ("traces", args.traces),
                    ("seed", args.seed),
                    ("profile_name", profile.name),
                    ("profile_digest", profile.digest()),
                ],
            ),
        )
    return 0 if all_pass else 2


# ---------------------------------------------------------------------------
# success-curve


def _cmd_success_curve(args):
    style = _parse_style(args.style)
    if style is Style.SBOX:
        raise ConfigError("success-curve covers the T-table recovery; use attack-sbox for sbox")
    profile = _load_profile(args.profile, style)
    counts = _parse_counts(args.traces)
    variants = (
        [("ordered", True), ("unordered", False)]
        if args.variant == "both"
        else [(args.variant, args.variant == "ordered")]
    )
    rows = []
    for vi, (name, flag) in enumerate(variants):
        rows.append(
            (
                name,
                success_curve(
                    style,
                    counts,
                    args.trials,
                    profile,
                    use_order=flag,
                    seed=[args.seed, vi],
                    prefetch=args.prefetch == "per_round",
                    jobs=args.jobs,
                ),
            )
        )
    csv = _curve_csv(style, rows)
    print(csv, end="")
    out = _outdir(args)
    if out is not None:
        _write(out / "curve.csv", csv)
        _write(
            out / "manifest.txt",
            _manifest(
                "success-curve",
                [
                    ("style", style.value),
                    ("traces", args.traces),
                    ("trials", args.trials),
                    ("variant", args.variant),
                    ("seed", args.seed),
                    ("profile_name", profile.name),
                    ("profile_digest", profile.digest()),
                ],
            ),
        )
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse defaults to exit code 2, which this tool reserves for
        # failed recoveries; configuration problems exit 4
        self.exit(4, f"{self.prog}: error: {message}\n")


def _add_common(sp, style=True, profile=True, traces=None, trials=None, prefetch=False):
    if style:
        sp.add_argument("--style", help="cipher table style: sbox, four_ttable, large_ttable")
    if profile:
        sp.add_argument(
            "--profile",
            help="noise profile: preset name or file path (default depends on style)",
        )
    if traces is not None:
        sp.add_argument("--traces", type=int, default=traces, help="number of encryptions")
    if trials is not None:
        sp.add_argument("--trials", type=int, default=trials, help="independent experiment repeats")
    if prefetch:
        sp.add_argument(
            "--prefetch",
            choices=["none", "per_round"],
            default="none",
            help="victim prefetches every table line before each round",
        )
    sp.add_argument("--seed", type=int, default=0, help="rng seed recorded in outputs")
    sp.add_argument("--jobs", type=int, default=1, help="worker threads for trial fan-out")
    sp.add_argument("--out", help="output directory (written files; stdout always gets the report)")


def _build_parser():
    parser = _Parser(prog="aesleak", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="write traced encryptions and noisy observations")
    _add_common(sp, traces=10, prefetch=True)
    sp.add_argument("--key", help="hex AES-128 key (default: drawn from seed)")
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("attack-ttable", help="two-round key recovery on a T-table style")
    _add_common(sp, traces=10, trials=20, prefetch=True)
    sp.add_argument("--in", dest="indir", help="simulate output directory to attack")
    sp.add_argument("--unordered", action="store_true", help="ignore window ordering evidence")
    sp.add_argument("--curve", help="also sweep these comma-separated trace counts")
    sp.add_argument(
        "--variant",
        choices=["both", "ordered", "unordered"],
        default="both",
        help="curve variants when --curve is given",
    )
    sp.set_defaults(func=_cmd_attack_ttable)

    sp = sub.add_parser("attack-sbox", help="last-round correlation attack on the sbox style")
    _add_common(sp, style=False, traces=500)
    sp.add_argument("--in", dest="indir", help="simulate output directory to attack")
    sp.add_argument(
        "--mode",
        choices=["relative", "absolute"],
        default="relative",
        help="leakage reading: normalized rows with outlier trimming, or raw counts",
    )
    sp.add_argument(
        "--bruteforce-limit",
        type=int,
        default=2**20,
        help="max key combinations tried when completing unresolved bytes",
    )
    sp.set_defaults(func=_cmd_attack_sbox)

    sp = sub.add_parser("calibrate", help="compare measured channel statistics with targets")
    _add_common(sp, traces=200)
    sp.add_argument(
        "--tolerance", type=float, default=5.0, help="pass/fail tolerance in percentage points"
    )
    sp.set_defaults(func=_cmd_calibrate)
    sp.set_defaults(style="four_ttable")

    sp = sub.add_parser("success-curve", help="recovery rate vs trace count")
    _add_common(sp, traces=None, trials=20, prefetch=True)
    sp.add_argument("--traces", required=True, help="comma-separated trace counts")
    sp.add_argument(
        "--variant",
        choices=["both", "ordered", "unordered"],
        default="both",
        help="which recovery variants to sweep",
    )
    sp.set_defaults(func=_cmd_success_curve)

    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"aesleak: config error: {exc}", file=sys.stderr)
        return 4
    except InsufficientDataError as exc:
        print(f"aesleak: insufficient data: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"aesleak: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
