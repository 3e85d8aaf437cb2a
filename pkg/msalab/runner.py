from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from msalab.config import RunConfig, build_plan
from msalab.errors import ConfigError, MsaLabError, ResourceLimitError
from msalab.experiments import (
    EstimateReport,
    ProbeResult,
    TrialPlan,
    combes_thomas_probe,
    correlator_decay_probe,
    cover_probe,
    dynamical_moment_growth,
    eigdecay_probe,
    initial_scale_probe,
    pair_singularity_probe,
    pi_decomposition_probe,
    recursion_probe,
    separability_probe,
    single_site_resonance,
    tensor_equivalence_probe,
    wegner_probe,
    weak_interaction_stability,
)
from msalab.outputs import METADATA_FILE, write_config, write_metadata, write_result
from msalab.settings import max_dimension

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_RESOURCE = 3

ProbeFn = Callable[[TrialPlan, RunConfig], ProbeResult]


def _scales(config: RunConfig, default: list[int]) -> list[int]:
    return list(config.probe.scales) or default


def _side(config: RunConfig, default: int) -> int:
    return config.probe.L if config.probe.L is not None else default


def _ct(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return combes_thomas_probe(plan, _side(config, 4), config.n, tuple(config.probe.etas))


def _wegner(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    result = wegner_probe(
        plan,
        _scales(config, [8, 16, 32]),
        n=config.n,
        check_cnr=config.probe.check_cnr,
        pair=config.probe.pair,
    )
    if config.n == 1:
        report = single_site_resonance(plan)
        result.reports.append(report)
    return result


def _initial(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return initial_scale_probe(plan, n=config.n, L0=_side(config, plan.params.L0), mu_tilde=config.probe.mu_tilde)


def _stability(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return weak_interaction_stability(plan, config.probe.h_list, L=_side(config, plan.params.L0), n=config.n)


def _pair(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return pair_singularity_probe(plan, L_k=config.probe.L, k=config.probe.k, n=config.n,
                                  grid_step=config.probe.grid_step)


def _correlator(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return correlator_decay_probe(plan, _side(config, 50), distances=config.probe.distances or None)


def _eigdecay(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return eigdecay_probe(plan, _side(config, 20), n=config.n)


def _dynloc(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return dynamical_moment_growth(plan, _scales(config, [30, 50]), s=config.probe.s, n=config.n)


def _recursion(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    # a single entry is a scale count ("--scales 2": L0 and L1)
    count = config.probe.scales[0] if len(config.probe.scales) == 1 else 2
    energy = config.probe.energies[0] if config.probe.energies else None
    return recursion_probe(plan, scales=count, energy=energy)


def _cover(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return cover_probe(plan, L=_side(config, 10), k=config.probe.k, n=config.n, grid_step=config.probe.grid_step)


def _tensor(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return tensor_equivalence_probe(plan, _side(config, 3), n=config.n)


def _pi_green(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return pi_decomposition_probe(plan, _side(config, 3), n=config.n)


def _separability(plan: TrialPlan, config: RunConfig) -> ProbeResult:
    return separability_probe(plan, _side(config, 2), radius=config.probe.radius)


PROBE_TABLE: dict[str, ProbeFn] = {
    "ct-check": _ct,
    "wegner": _wegner,
    "initial": _initial,
    "stability": _stability,
    "pair": _pair,
    "correlator": _correlator,
    "eigdecay": _eigdecay,
    "dynloc": _dynloc,
    "recursion": _recursion,
    "cover": _cover,
    "tensor": _tensor,
    "pi-green": _pi_green,
    "separability": _separability,
}


@dataclass
class RunOutcome:
    exit_code: int
    out_dir: Optional[Path] = None
    result: Optional[ProbeResult] = None
    messages: list[str] = field(default_factory=list)


def run_probe(config: RunConfig, cap: Optional[int] = None) -> ProbeResult:
    """
    Raises:
        ConfigError: inconsistent configuration
        ResourceLimitError: some cube exceeds the dimension cap
        MsaLabError: a probe precondition does not hold
    """
    plan = build_plan(config, cap=cap if cap is not None else max_dimension())
    logger.info(
        "Running probe: probe=%s trials=%s seed=%s workers=%s",
        config.probe.name, plan.trials, plan.master_seed, plan.workers,
    )
    return PROBE_TABLE[config.probe.name](plan, config)


def run(config: RunConfig, out_dir: Optional[Path] = None) -> RunOutcome:
    """
    Run the configured probe and write its artifacts. Exit codes: 0 all hard
    assertions passed, 1 some failed, 2 invalid configuration or failed
    precondition, 3 resource cap exceeded.
    """
    out_dir = Path(out_dir or config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, out_dir)
    started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    started = time.perf_counter()
    outcome = RunOutcome(exit_code=EXIT_OK, out_dir=out_dir)
    try:
        result = run_probe(config)
    except ResourceLimitError as exc:
        logger.error("Resource cap exceeded: %s", exc)
        outcome.exit_code = EXIT_RESOURCE
        outcome.messages.append(str(exc))
    except ConfigError as exc:
        logger.error("Invalid configuration: %s", exc.diagnostic())
        outcome.exit_code = EXIT_CONFIG
        outcome.messages.append(exc.diagnostic())
    except MsaLabError as exc:
        logger.error("Probe precondition failed: %s", exc)
        outcome.exit_code = EXIT_CONFIG
        outcome.messages.append(str(exc))
    else:
        outcome.result = result
        write_result(result, out_dir)
        if not result.passed:
            outcome.exit_code = EXIT_ASSERTION
            outcome.messages.extend(result.failures)

    write_metadata(
        out_dir / METADATA_FILE,
        started_at=started_at,
        finished_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        elapsed=time.perf_counter() - started,
        exit_code=outcome.exit_code,
        failures=outcome.messages,
    )
    logger.info("Run finished: probe=%s exit=%s dir=%s", config.probe.name, outcome.exit_code, out_dir)
    return outcome


def summary_lines(reports: list[EstimateReport]) -> list[str]:
    return [
        f"{r.probe:<22} L={'' if r.L is None else r.L!s:<4} E={r.energy:<12} "
        f"estimate={r.estimate:.6g} ci=[{r.ci_lo:.6g}, {r.ci_hi:.6g}] trials={r.trials}"
        for r in reports
    ]
