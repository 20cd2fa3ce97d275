"""Command-line harness: scenario files in, persistent run reports out.

Every run reads a JSON scenario, dispatches to the matching toolkit routine,
and appends a report into a directory named by the content hash of the
effective scenario.  The report splits into a deterministic hashed section
(inputs echo, results, assertion outcomes) and a timings section that is
excluded from the hash, so re-running the same scenario with the same seed
reproduces the hashed section byte for byte.

Exit codes: 0 all assertions passed, 1 an assertion failed, 2 usage or
parse error, 3 budget exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import stateio
from .compression import CompressionScenario, Povm, run_protocol
from .convex_split import ConvexSplitInstance, verify_lemma
from .entropies import dh_eps, dmax, dmax_smooth_upper, rel_entropy_and_variance, vn_rates
from .extractor import Factorization, build_plan, compress_without_feedback, run_extractor
from .families import PairwiseFamily, family_table_rows
from .states import CqState, DensityOperator, StateVector

REPORT_SCHEMA = "qmc-report/1"
KINDS = ("entropy", "convex-split", "compress", "extract", "compose", "family", "rates")
SWEEP_AXES = {
    "n": ("convex-split", "compress"),
    "b": ("compress",),
    "epsilon": ("entropy", "compress", "extract"),
    "k": ("extract",),
}
OVERRIDE_KEYS = {
    "entropy": ("epsilon",),
    "convex-split": ("n",),
    "compress": ("n", "b", "epsilon"),
    "extract": ("k", "epsilon"),
    "compose": ("delta", "n", "b"),
    "family": (),
    "rates": (),
}

EXIT_PASS = 0
EXIT_ASSERTION = 1
EXIT_USAGE = 2
EXIT_BUDGET = 3


class ScenarioError(ValueError):
    """A scenario file or command invocation is invalid."""


def _is_budget_message(msg: str) -> bool:
    return "budget exceeded" in msg or "refused" in msg


def _jsonable(x):
    if x is None or isinstance(x, (bool, int, str)):
        return x
    if isinstance(x, float):
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return _jsonable(float(x))
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    raise TypeError(f"cannot serialize a {type(x).__name__} into a report")


def _canonical(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def _check_number(value, where: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ScenarioError(f"{where}: expected a number, got {type(value).__name__}")
    return float(value)


def _check_int(value, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ScenarioError(f"{where}: expected an integer, got {type(value).__name__}")
    return value


def _check_fields(obj: dict, required: tuple, optional: tuple, where: str) -> None:
    missing = [k for k in required if k not in obj]
    if missing:
        raise ScenarioError(f"{where}: missing field(s) {', '.join(missing)}")
    unknown = sorted(k for k in obj if k not in required and k not in optional)
    if unknown:
        raise ScenarioError(f"{where}: unknown field(s) {', '.join(unknown)}")


def load_scenario(path: str) -> dict:
    """Parse and validate a scenario file; overrides stay unapplied."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"parse error in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(obj, dict):
        raise ScenarioError(f"{path}: scenario must be a JSON object")
    _check_fields(obj, ("kind", "payload"), ("rngSeed", "overrides"), "scenario")
    kind = obj["kind"]
    if kind not in KINDS:
        raise ScenarioError(f"scenario: unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    if not isinstance(obj["payload"], dict):
        raise ScenarioError("scenario: payload must be an object")
    seed = obj.get("rngSeed", 0)
    seed = _check_int(seed, "scenario.rngSeed")
    if not 0 <= seed < 2 ** 64:
        raise ScenarioError(f"scenario.rngSeed: {seed} does not fit an unsigned 64-bit integer")
    overrides = obj.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ScenarioError("scenario: overrides must be an object")
    allowed = OVERRIDE_KEYS[kind]
    unknown = sorted(k for k in overrides if k not in allowed)
    if unknown:
        raise ScenarioError(
            f"scenario.overrides: field(s) {', '.join(unknown)} not valid for kind {kind!r}"
        )
    for key, value in overrides.items():
        _check_number(value, f"scenario.overrides.{key}")
    return {"kind": kind, "payload": obj["payload"], "rngSeed": seed, "overrides": dict(overrides)}


def _state_ref(obj, where: str, base_dir: str):
    if isinstance(obj, dict) and set(obj) == {"file"}:
        path = obj["file"]
        if not isinstance(path, str):
            raise ScenarioError(f"{where}.file: expected a path string")
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        try:
            return stateio.load_state(path)
        except OSError as exc:
            raise ScenarioError(f"{where}: cannot read state file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ScenarioError(
                f"{where}: parse error in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
    return stateio.state_from_json(obj)


def _as_density(state, where: str) -> DensityOperator:
    if isinstance(state, StateVector):
        return state.to_density()
    if isinstance(state, DensityOperator):
        return state
    raise ScenarioError(f"{where}: expected a density operator or state vector")


def _as_cq(state, where: str) -> CqState:
    if not isinstance(state, CqState):
        raise ScenarioError(f"{where}: expected a classical-quantum state")
    return state


# ---------------------------------------------------------------------------
# per-kind runners: each returns (results, assertions, extra files)


def _assertion(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def _run_entropy(payload: dict, seed: int, overrides: dict, base_dir: str, args):
    _check_fields(payload, ("rho", "sigma"), ("epsilon",), "payload")
    rho = _as_density(_state_ref(payload["rho"], "payload.rho", base_dir), "payload.rho")
    sigma = _as_density(_state_ref(payload["sigma"], "payload.sigma", base_dir), "payload.sigma")
    eps = _check_number(payload.get("epsilon", 0.25), "payload.epsilon")
    eps = float(overrides.get("epsilon", eps))
    d, v = rel_entropy_and_variance(rho.matrix, sigma.matrix)
    dm = dmax(rho.matrix, sigma.matrix)
    smooth = dmax_smooth_upper(rho.matrix, sigma.matrix, eps)
    test = dh_eps(rho.matrix, sigma.matrix, eps)
    results = {
        "epsilon": eps,
        "relEntropy": d,
        "relEntropyVariance": v,
        "dmax": dm,
        "dmaxSmooth": smooth.value,
        "dhValue": test.value,
        "dhTypeI": test.type1,
        "dhTypeII": test.type2,
    }
    assertions = [
        _assertion(
            "hypothesis test stays within the type-I budget",
            test.type1 <= eps + 1e-9,
            f"type-I {test.type1!r} vs epsilon {eps!r}",
        ),
        _assertion(
            "smoothing does not increase the max-relative entropy",
            smooth.value <= dm + 1e-9,
            f"smoothed {smooth.value!r} vs exact {dm!r}",
        ),
    ]
    return results, assertions, []


def _parse_sigma_list(raw, where: str):
    if not isinstance(raw, list) or not raw:
        raise ScenarioError(f"{where}: expected 'uniform' or a nonempty list")
    out = []
    for i, entry in enumerate(raw):
        if isinstance(entry, str) or (
            isinstance(entry, (int, float)) and not isinstance(entry, bool)
        ):
            out.append(entry)
        else:
            raise ScenarioError(f"{where}[{i}]: expected a number or a fraction string")
    return out


def _run_convex_split(payload: dict, seed: int, overrides: dict, base_dir: str, args):
    from fractions import Fraction

    _check_fields(payload, ("rho", "n"), ("sigma", "mode"), "payload")
    rho = _as_cq(_state_ref(payload["rho"], "payload.rho", base_dir), "payload.rho")
    n = _check_int(payload["n"], "payload.n")
    if "n" in overrides:
        n = int(overrides["n"])
    mode = payload.get("mode", "pairwise")
    if mode not in ("pairwise", "iid"):
        raise ScenarioError(f"payload.mode: expected 'pairwise' or 'iid', got {mode!r}")
    sigma_raw = payload.get("sigma", "uniform")
    if sigma_raw == "uniform":
        alphabet = rho.classical_registers[0].dim
        sigma = [Fraction(1, alphabet)] * alphabet
    else:
        sigma = _parse_sigma_list(sigma_raw, "payload.sigma")
    inst = ConvexSplitInstance(rho, sigma, n, mode=mode)
    check = verify_lemma(inst)
    results = {
        "n": n,
        "mode": mode,
        "k": inst.k,
        "bound": check.bound,
        "dSplit": check.d_split,
        "dIid": check.d_iid,
    }
    assertions = [
        _assertion(
            "i.i.d. split divergence within the mixing bound",
            check.d_iid <= check.bound + 1e-9,
            f"{check.d_iid!r} vs {check.bound!r}",
        )
    ]
    if check.d_split is not None:
        assertions.insert(
            0,
            _assertion(
                "pairwise split divergence within the mixing bound",
                check.d_split <= check.bound + 1e-9,
                f"{check.d_split!r} vs {check.bound!r}",
            ),
        )
    return results, assertions, []


def _parse_compress_payload(payload: dict, seed: int, overrides: dict, base_dir: str,
                            where: str = "payload"):
    _check_fields(payload, ("psi", "povm", "epsilon"), ("sigma",), where)
    psi = _state_ref(payload["psi"], f"{where}.psi", base_dir)
    if not isinstance(psi, StateVector):
        raise ScenarioError(f"{where}.psi: expected a pure state vector")
    raw = payload["povm"]
    if not isinstance(raw, list) or not raw:
        raise ScenarioError(f"{where}.povm: expected a nonempty list of matrices")
    povm = Povm([stateio.matrix_from_json(m, f"{where}.povm[{i}]") for i, m in enumerate(raw)])
    eps = _check_number(payload["epsilon"], f"{where}.epsilon")
    eps = float(overrides.get("epsilon", eps))
    sigma = payload.get("sigma", "uniform")
    if sigma != "uniform":
        sigma = [
            _check_number(x, f"{where}.sigma[{i}]")
            for i, x in enumerate(_parse_sigma_list(sigma, f"{where}.sigma"))
        ]
    n_override = int(overrides["n"]) if "n" in overrides else None
    b_override = int(overrides["b"]) if "b" in overrides else None
    return CompressionScenario(
        psi, povm, eps, sigma=sigma, n_override=n_override, b_override=b_override, seed=seed
    )


def _compress_results(report) -> tuple[dict, dict]:
    results = asdict(report)
    timings = results.pop("timings", {})
    return results, timings


def _compress_assertions(report) -> list:
    return [
        _assertion(
            "final distance within the chain bound",
            report.d_final <= report.chain_bound + 1e-6,
            f"{report.d_final!r} vs {report.chain_bound!r}",
        ),
        _assertion(
            "decoder failure within the analytic budget",
            report.decoder_failure <= report.failure_bound + 1e-9,
            f"{report.decoder_failure!r} vs {report.failure_bound!r}",
        ),
    ]


def _run_compress(payload: dict, seed: int, overrides: dict, base_dir: str, args):
    scenario = _parse_compress_payload(payload, seed, overrides, base_dir)
    report = run_protocol(scenario)
    results, timings = _compress_results(report)
    return results, _compress_assertions(report), [("timings", timings)]


def _extract_assertions(params, report) -> list:
    out = [
        _assertion(
            "output divergence within the mixing bound",
            report.d_out <= report.d_bound + 1e-8,
            f"{report.d_out!r} vs {report.d_bound!r}",
        ),
        _assertion(
            "output trace distance within the Pinsker corollary",
            report.delta_out <= math.sqrt(2.0 * max(report.d_out, 0.0)) + 1e-9,
            f"{report.delta_out!r}",
        ),
        _assertion(
            "extracted bits reach the guarantee",
            report.extracted_bits >= report.guaranteed_bits - 1e-9,
            f"{report.extracted_bits!r} vs {report.guaranteed_bits!r}",
        ),
    ]
    if params.epsilon <= 0.5:
        out.append(
            _assertion(
                "seed length within the stated bound",
                params.seed_bound_met,
                f"{params.seed_bits!r} vs {params.seed_bound!r}",
            )
        )
    return out


def _run_extract(payload: dict, seed: int, overrides: dict, base_dir: str, args):
    _check_fields(payload, ("source", "k", "epsilon"), (), "payload")
    source = _as_cq(_state_ref(payload["source"], "payload.source", base_dir), "payload.source")
    k = _check_number(payload["k"], "payload.k")
    eps = _check_number(payload["epsilon"], "payload.epsilon")
    k = float(overrides.get("k", k))
    eps = float(overrides.get("epsilon", eps))
    if len(source.classical_registers) != 1:
        raise ScenarioError("payload.source: expected exactly one classical register")
    plan = build_plan(source.classical_registers[0].dim, k, eps)
    state, report = run_extractor(source, plan)
    results = {"plan": asdict(plan.params), "run": asdict(report)}
    files = []
    if getattr(args, "table", False):
        lines = ["v,ubar,weight"]
        for (v, u), (w, _block) in sorted(state.blocks.items()):
            lines.append(f"{v},{u},{w!r}")
        files.append(("table", "\n".join(lines) + "\n"))
    return results, _extract_assertions(plan.params, report), files


def _load_factorization(obj, where: str, base_dir: str) -> Factorization:
    if isinstance(obj, dict) and set(obj) == {"file"}:
        path = obj["file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ScenarioError(f"{where}: cannot read factorization file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ScenarioError(
                f"{where}: parse error in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    _check_fields(obj, ("target", "conditional"), (), where)
    raw = obj["target"]
    if not isinstance(raw, list) or not raw:
        raise ScenarioError(f"{where}.target: expected a nonempty list of matrices")
    target = Povm([stateio.matrix_from_json(m, f"{where}.target[{i}]") for i, m in enumerate(raw)])
    cond = obj["conditional"]
    if not isinstance(cond, list) or not all(isinstance(row, list) for row in cond):
        raise ScenarioError(f"{where}.conditional: expected a list of number rows")
    return Factorization(target, np.array(cond, dtype=float))


def _run_compose(payload: dict, seed: int, overrides: dict, base_dir: str, args):
    _check_fields(payload, ("scenario", "factorization", "delta"), (), "payload")
    inner = payload["scenario"]
    if isinstance(inner, dict) and set(inner) == {"file"}:
        path = inner["file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        loaded = load_scenario(path)
        if loaded["kind"] != "compress":
            raise ScenarioError(
                f"payload.scenario: file {path} has kind {loaded['kind']!r}, expected 'compress'"
            )
        inner = loaded["payload"]
        base_dir = os.path.dirname(os.path.abspath(path))
    if not isinstance(inner, dict):
        raise ScenarioError("payload.scenario: expected an object or a file reference")
    inner_overrides = {k: overrides[k] for k in ("n", "b") if k in overrides}
    scenario = _parse_compress_payload(inner, seed, inner_overrides, base_dir,
                                       where="payload.scenario")
    fact = _load_factorization(payload["factorization"], "payload.factorization", base_dir)
    delta = _check_number(payload["delta"], "payload.delta")
    delta = float(overrides.get("delta", delta))
    report = compress_without_feedback(scenario, fact, delta)
    results = asdict(report)
    timings = results["stage_one"].pop("timings", {})
    assertions = [
        _assertion(
            "composed distance within the stage sum",
            report.d_composed <= report.stage_sum + 1e-6,
            f"{report.d_composed!r} vs {report.stage_sum!r}",
        ),
        _assertion(
            "randomness ledger balances",
            report.final_bits
            == report.initial_bits - report.stage_one.consumed_bits + report.extracted_bits,
            f"final {report.final_bits!r}, initial {report.initial_bits!r}",
        ),
    ] + _compress_assertions(report.stage_one)
    if report.extraction is not None:
        assertions.append(
            _assertion(
                "extraction divergence within the mixing bound",
                report.extraction.d_out <= report.extraction.d_bound + 1e-8,
                f"{report.extraction.d_out!r} vs {report.extraction.d_bound!r}",
            )
        )
    return results, assertions, [("timings", timings)]


def _run_family(payload: dict, seed: int, overrides: dict, base_dir: str, args):
    _check_fields(payload, ("q", "n"), (), "payload")
    q = _check_int(payload["q"], "payload.q")
    n = _check_int(payload["n"], "payload.n")
    family = PairwiseFamily(q, n)
    rows = family_table_rows(family)
    strings = {row[2:] for row in rows}
    results = {"q": q, "n": n, "t": family.t, "size": family.size, "rows": len(rows)}
    assertions = [
        _assertion(
            "seed table enumerates every seed pair",
            len(rows) == family.size,
            f"{len(rows)} rows for {family.size} seeds",
        ),
        _assertion(
            "support strings are distinct",
            len(strings) == family.size,
            f"{len(strings)} distinct strings",
        ),
    ]
    header = "aIndex,bIndex," + ",".join(f"c{i + 1}" for i in range(n))
    lines = [header] + [",".join(str(x) for x in row) for row in rows]
    return results, assertions, [("table", "\n".join(lines) + "\n")]


def _run_rates(payload: dict, seed: int, overrides: dict, base_dir: str, args):
    _check_fields(payload, ("state", "groups"), (), "payload")
    state = _state_ref(payload["state"], "payload.state", base_dir)
    groups = payload["groups"]
    if not isinstance(groups, dict):
        raise ScenarioError("payload.groups: expected an object of role -> register names")
    for role, names in groups.items():
        if role not in ("R", "C", "B", "A"):
            raise ScenarioError(f"payload.groups: unknown role {role!r}")
        if not isinstance(names, list) or not all(isinstance(x, str) for x in names):
            raise ScenarioError(f"payload.groups.{role}: expected a list of register names")
    rates = vn_rates(state, {role: list(names) for role, names in groups.items()})
    results = {
        "total": rates.total,
        "marginals": dict(rates.marginals),
        "hCGivenRB": rates.h_c_given_rb,
        "iRCGivenB": rates.i_r_c_given_b,
        "iAB": rates.i_a_b,
    }
    assertions = [
        _assertion(
            "conditional mutual information is nonnegative",
            rates.i_r_c_given_b >= -1e-9,
            f"{rates.i_r_c_given_b!r}",
        )
    ]
    return results, assertions, []


RUNNERS = {
    "entropy": _run_entropy,
    "convex-split": _run_convex_split,
    "compress": _run_compress,
    "extract": _run_extract,
    "compose": _run_compose,
    "family": _run_family,
    "rates": _run_rates,
}


# ---------------------------------------------------------------------------
# report persistence


def _out_root(args) -> str:
    return args.out or os.environ.get("QMC_OUT") or "qmc-runs"


def _run_dir(root: str, scenario: dict) -> str:
    digest = hashlib.sha256(_canonical(scenario).encode()).hexdigest()[:16]
    return os.path.join(root, f"{scenario['kind']}-{digest}")


def _next_index(run_dir: str, prefix: str) -> int:
    try:
        names = os.listdir(run_dir)
    except OSError:
        return 1
    count = sum(1 for n in names if n.startswith(prefix + "-") and n.endswith(".json"))
    return count + 1


def _write_report(run_dir: str, scenario: dict, results, assertions, timings) -> str:
    os.makedirs(run_dir, exist_ok=True)
    scen_path = os.path.join(run_dir, "scenario.json")
    if not os.path.exists(scen_path):
        with open(scen_path, "w", encoding="utf-8") as fh:
            fh.write(_canonical(scenario) + "\n")
    hashed = {
        "schema": REPORT_SCHEMA,
        "kind": scenario["kind"],
        "inputs": scenario,
        "results": results,
        "assertions": assertions,
    }
    canon = _canonical(hashed)
    digest = hashlib.sha256(canon.encode()).hexdigest()
    report = {
        "schema": REPORT_SCHEMA,
        "hashed": json.loads(canon),
        "hash": digest,
        "timings": _jsonable(timings),
    }
    index = _next_index(run_dir, "report")
    path = os.path.join(run_dir, f"report-{index:03d}.json")
    # reports are append-only: a fresh index per run, never overwritten
    while os.path.exists(path):
        index += 1
        path = os.path.join(run_dir, f"report-{index:03d}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    return path


def _write_extra(run_dir: str, name: str, index: int, text: str) -> str:
    path = os.path.join(run_dir, f"{name}-{index:03d}.csv")
    while os.path.exists(path):
        index += 1
        path = os.path.join(run_dir, f"{name}-{index:03d}.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _execute(scenario: dict, base_dir: str, args) -> int:
    runner = RUNNERS[scenario["kind"]]
    t0 = time.perf_counter()
    failed_exception = None
    try:
        results, assertions, files = runner(
            scenario["payload"], scenario["rngSeed"], scenario["overrides"], base_dir, args
        )
    except AssertionError as exc:
        results = {}
        assertions = [_assertion("module invariant", False, str(exc))]
        files = []
        failed_exception = exc
    elapsed = time.perf_counter() - t0
    timings = {"totalSeconds": elapsed}
    extra_text = {}
    for name, payload in files:
        if name == "timings":
            timings["protocol"] = payload
        else:
            extra_text[name] = payload
    results = _jsonable(results)
    run_dir = _run_dir(_out_root(args), scenario)
    path = _write_report(run_dir, scenario, results, assertions, timings)
    index = int(os.path.basename(path).split("-")[1].split(".")[0])
    for name, text in extra_text.items():
        extra = _write_extra(run_dir, name, index, text)
        print(f"{name}: {extra}")
    print(f"report: {path}")
    ok = True
    for entry in assertions:
        status = "PASS" if entry["passed"] else "FAIL"
        ok = ok and entry["passed"]
        line = f"{status} {entry['name']}"
        if not entry["passed"]:
            line += f" ({entry['detail']})"
        print(line)
    if failed_exception is not None:
        print(f"assertion failed: {failed_exception}", file=sys.stderr)
    return EXIT_PASS if ok else EXIT_ASSERTION


def _effective_scenario(args, kind: str) -> tuple[dict, str]:
    if kind == "family" and args.scenario is None:
        if args.q is None or args.n is None:
            raise ScenarioError("family needs either --scenario or both --q and --n")
        scenario = {
            "kind": "family",
            "payload": {"q": args.q, "n": args.n},
            "rngSeed": args.seed or 0,
            "overrides": {},
        }
        return scenario, os.getcwd()
    if args.scenario is None:
        raise ScenarioError(f"{kind} requires --scenario")
    scenario = load_scenario(args.scenario)
    if scenario["kind"] != kind:
        raise ScenarioError(
            f"scenario kind {scenario['kind']!r} does not match the {kind!r} subcommand"
        )
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ScenarioError(f"--seed {args.seed} does not fit an unsigned 64-bit integer")
        scenario["rngSeed"] = args.seed
    for key in OVERRIDE_KEYS[kind]:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            scenario["overrides"][key] = flag
    if kind == "family" and (args.q is not None or args.n is not None):
        if args.q is not None:
            scenario["payload"]["q"] = args.q
        if args.n is not None:
            scenario["payload"]["n"] = args.n
    base_dir = os.path.dirname(os.path.abspath(args.scenario))
    return scenario, base_dir


def _flatten(prefix: str, obj, into: dict) -> None:
    if isinstance(obj, dict):
        for key, value in obj.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), value, into)
    elif obj is None or isinstance(obj, (bool, int, float, str)):
        into[prefix] = obj


def _run_sweep(args) -> int:
    if args.scenario is None:
        raise ScenarioError("sweep requires --scenario")
    scenario = load_scenario(args.scenario)
    kind = scenario["kind"]
    axis = args.axis
    if kind not in SWEEP_AXES.get(axis, ()):
        raise ScenarioError(f"axis {axis!r} is not numeric for scenario kind {kind!r}")
    if args.seed is not None:
        scenario["rngSeed"] = args.seed
    base_dir = os.path.dirname(os.path.abspath(args.scenario))
    raw_values = [v for v in (args.values or "").split(",") if v.strip() != ""]
    values = []
    for v in raw_values:
        try:
            values.append(int(v) if axis in ("n", "b") else float(v))
        except ValueError as exc:
            raise ScenarioError(f"sweep value {v!r} is not numeric for axis {axis!r}") from exc

    runner = RUNNERS[kind]
    rows = []
    columns = None
    all_ok = True
    t0 = time.perf_counter()
    for value in values:
        point = {
            "kind": kind,
            "payload": scenario["payload"],
            "rngSeed": scenario["rngSeed"],
            "overrides": {**scenario["overrides"], axis: value},
        }
        results, assertions, _files = runner(
            point["payload"], point["rngSeed"], point["overrides"], base_dir, args
        )
        flat = {}
        _flatten("", _jsonable(results), flat)
        flat["allPassed"] = all(a["passed"] for a in assertions)
        all_ok = all_ok and flat["allPassed"]
        if columns is None:
            columns = sorted(flat)
        rows.append((value, flat))
    elapsed = time.perf_counter() - t0

    header = [axis] + (columns or [])
    lines = [",".join(header)]
    for value, flat in rows:
        cells = [repr(value) if isinstance(value, float) else str(value)]
        for col in columns or []:
            cell = flat.get(col)
            cells.append("" if cell is None else (repr(cell) if isinstance(cell, float) else str(cell)))
        lines.append(",".join(cells))
    csv_text = "\n".join(lines) + "\n"

    sweep_scenario = {
        "kind": kind,
        "payload": scenario["payload"],
        "rngSeed": scenario["rngSeed"],
        "overrides": scenario["overrides"],
        "sweep": {"axis": axis, "values": values},
    }
    run_dir = _run_dir(_out_root(args), {**scenario, "sweep": {"axis": axis, "values": values}})
    os.makedirs(run_dir, exist_ok=True)
    index = _next_index(run_dir, "report")
    path = _write_report(
        run_dir,
        sweep_scenario,
        {"axis": axis, "points": len(values), "csv": csv_text},
        [_assertion("every sweep point passed its assertions", all_ok, f"{len(values)} points")],
        {"totalSeconds": elapsed},
    )
    csv_path = _write_extra(run_dir, "sweep", index, csv_text)
    print(f"sweep: {csv_path}")
    print(f"report: {path}")
    return EXIT_PASS if all_ok else EXIT_ASSERTION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qmcomp",
        description="Desk-scale one-shot quantum information experiments from scenario files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", help="path to a scenario JSON file")
        p.add_argument("--out", help="output root (default: $QMC_OUT or ./qmc-runs)")
        p.add_argument("--seed", type=int, help="override the scenario rngSeed")

    p = sub.add_parser("entropy", help="divergences and hypothesis-testing quantities")
    common(p)
    p.add_argument("--epsilon", type=float, help="override the smoothing / test parameter")

    p = sub.add_parser("convex-split", help="split a cq state across decoy positions")
    common(p)
    p.add_argument("--n", type=int, help="override the number of positions")

    p = sub.add_parser("compress", help="run the measurement compression protocol")
    common(p)
    p.add_argument("--n", type=int, help="override the number of decoy positions")
    p.add_argument("--b", type=int, help="override the decoding block size")
    p.add_argument("--epsilon", type=float, help="override the error parameter")

    p = sub.add_parser("extract", help="run the randomness extractor")
    common(p)
    p.add_argument("--k", type=float, help="override the entropy parameter")
    p.add_argument("--epsilon", type=float, help="override the error parameter")
    p.add_argument("--table", action="store_true", help="also write the output table CSV")

    p = sub.add_parser("compose", help="compression without feedback plus extraction")
    common(p)
    p.add_argument("--delta", type=float, help="override the extraction error parameter")
    p.add_argument("--n", type=int, help="override the stage-one decoy positions")
    p.add_argument("--b", type=int, help="override the stage-one decoding block size")

    p = sub.add_parser("family", help="enumerate a pairwise-independent seed table")
    common(p)
    p.add_argument("--q", type=int, help="alphabet size (prime power)")
    p.add_argument("--n", type=int, help="number of positions")

    p = sub.add_parser("rates", help="von Neumann rate formulas for a partitioned state")
    common(p)

    p = sub.add_parser("sweep", help="run a scenario across one numeric axis, emitting CSV")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES), help="parameter to vary")
    p.add_argument(
        "--values", required=True, help="comma-separated values, in the order to run them"
    )

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        if args.command == "sweep":
            return _run_sweep(args)
        scenario, base_dir = _effective_scenario(args, args.command)
        return _execute(scenario, base_dir, args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        msg = str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_BUDGET if _is_budget_message(msg) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
