"""
SSPG command line
train / eval / analyze (psrf-trace, transition-matrix, ss-hist), run
directories, metrics CSVs and exit codes.
"""
import argparse
import copy
import csv
import json
import logging
import os

import numpy as np
from dotenv import load_dotenv

import diffcore as dc
import grdiag
import render
from agent import SSPGAgent
from btpolicy import simulate_chain
from config import load_config, make_streams, parse_config
from critic import q_eval
from envs import (
    CanonicalOracle,
    bin_masses,
    canonical_density,
    empirical_masses,
    goal_visit_frequencies,
    quantized_transition_matrix,
    tv_distance,
)
from errors import CheckpointError, ConfigError, ContractError, DegenerateCovarianceError, NumericError, SSPGError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

METRIC_COLUMNS = [
    "kind", "step", "reward", "N", "converged", "R_p",
    "policy_loss", "critic_loss", "alpha", "N_hat", "mean_R_p",
]
EVAL_COLUMNS = ["step", "episodes", "mean_return", "mean_N", "converged_fraction", "goal_frequencies", "out_of_radius"]


class CsvLog:
    """Append-only CSV with a fixed header, flushed after every row."""

    def __init__(self, path, columns):
        self.path = path
        self._file = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=columns, restval="")
        self._writer.writeheader()
        self._file.flush()

    def write(self, row):
        self._writer.writerow(row)
        self._file.flush()

    def close(self):
        self._file.close()


# =============================================================================
# Shared helpers
# =============================================================================

def load_agent(path):
    """(RunConfig, env, agent) rebuilt from a checkpoint."""
    stores, extra = dc.load_checkpoint(path)
    run_config = extra.get("run_config")
    if not isinstance(run_config, dict):
        raise CheckpointError(f"Checkpoint {path} carries no run config")
    try:
        config = parse_config(run_config)
    except ConfigError as e:
        raise CheckpointError(f"Checkpoint {path} has an invalid run config: {e}") from e
    env = config.make_env()
    agent = SSPGAgent.create(config.agent, env.obs_dim, env.action_dim, make_streams(config.seed)["init"])
    agent.restore(stores, extra)
    logger.info(f"Loaded checkpoint {path} (N_hat={agent.convergence.n_hat:.2f}, alpha={agent.temperature.alpha:.4g})")
    return config, env, agent


def evaluate(agent, env, episodes, streams, max_steps=None):
    """Greedy-free evaluation: acting without random exploration, no learning."""
    returns, positions, steps, converged, traces = [], [], [], [], []
    for _ in range(episodes):
        s = env.reset()
        action, stats = agent.act(s, streams["eval"], explore=False, max_steps=max_steps, memory_rng=streams["memory"])
        position = env.from_cube(action)
        reward, _ = env.step(position)
        returns.append(reward)
        positions.append(position)
        steps.append(stats.n_steps)
        converged.append(bool(stats.converged))
        traces.append([[n, r_p] for n, r_p in stats.trace])
    report = {
        "episodes": episodes,
        "returns": returns,
        "mean_return": float(np.mean(returns)) if returns else None,
        "goal_frequencies": None,
        "out_of_radius": None,
        "n_steps": steps,
        "mean_N": float(np.mean(steps)) if steps else None,
        "median_N": float(np.median(steps)) if steps else None,
        "max_N": int(np.max(steps)) if steps else None,
        "converged_fraction": float(np.mean(converged)) if converged else None,
        "psrf_traces": traces,
    }
    if positions:
        freqs, out_mass = goal_visit_frequencies(np.stack(positions), env)
        report["goal_frequencies"] = freqs.tolist()
        report["out_of_radius"] = out_mass
    return report


def _output_dir(args, fallback):
    out = args.out or fallback
    os.makedirs(out, exist_ok=True)
    return out


def _nan_to_blank(value):
    return "" if value is None or (isinstance(value, float) and np.isnan(value)) else value


# =============================================================================
# Commands
# =============================================================================

def cmd_train(args):
    config = load_config(args.config, seed=args.seed, output_dir=args.out)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    config.write_resolved(os.path.join(out, "resolved_config.env"))

    streams = make_streams(config.seed)
    env = config.make_env()
    agent = SSPGAgent.create(config.agent, env.obs_dim, env.action_dim, streams["init"])
    metrics = CsvLog(os.path.join(out, "metrics.csv"), METRIC_COLUMNS)
    evals = CsvLog(os.path.join(out, "eval.csv"), EVAL_COLUMNS) if config.eval_every else None
    logger.info(f"Training {config.env_kind} with {env.n_goals} goals for {config.steps} steps -> {out}")

    pending_r_p = []
    try:
        for step in range(1, config.steps + 1):
            s = env.reset()
            action, stats = agent.act(
                s, streams["policy_noise"], memory_rng=streams["memory"], explore_rng=streams["explore"]
            )
            reward, done = env.step(env.from_cube(action))
            agent.buffer.push(s, action, reward, env.reset() if done else s, done)
            metrics.write({
                "kind": "act", "step": step, "reward": reward, "N": stats.n_steps,
                "converged": int(stats.converged), "R_p": _nan_to_blank(stats.r_p),
                "N_hat": agent.convergence.n_hat,
            })
            if np.isfinite(stats.r_p):
                pending_r_p.append(stats.r_p)

            reports = []
            if agent.ready_to_learn():
                reports = agent.train_on_buffer(streams["buffer"], streams["policy_noise"])
            for report in reports:
                metrics.write({
                    "kind": "learn", "step": step, "policy_loss": report.policy_loss,
                    "critic_loss": report.critic_loss, "alpha": report.alpha, "N_hat": report.n_hat,
                    "mean_R_p": _nan_to_blank(float(np.mean(pending_r_p)) if pending_r_p else None),
                })
            if reports:
                pending_r_p = []

            if config.log_every and step % config.log_every == 0:
                last = reports[-1] if reports else None
                logger.info(
                    f"step {step}: reward={reward:.4f} N={stats.n_steps} N_hat={agent.convergence.n_hat:.2f} "
                    f"alpha={agent.temperature.alpha:.4g}"
                    + (f" policy_loss={last.policy_loss:.4f} critic_loss={last.critic_loss:.4f}" if last else "")
                )
            if evals is not None and step % config.eval_every == 0:
                # Deep copy keeps the training memory and N_hat untouched
                summary = evaluate(copy.deepcopy(agent), env, config.eval_episodes, make_streams(config.seed + step))
                evals.write({
                    "step": step, "episodes": summary["episodes"], "mean_return": summary["mean_return"],
                    "mean_N": summary["mean_N"], "converged_fraction": summary["converged_fraction"],
                    "goal_frequencies": ";".join(f"{f:.4f}" for f in summary["goal_frequencies"] or []),
                    "out_of_radius": summary["out_of_radius"],
                })
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                agent.save(
                    os.path.join(out, f"checkpoint_{step}.json"), {"run_config": config.as_env(), "step": step}
                )
    finally:
        metrics.close()
        if evals is not None:
            evals.close()

    agent.save(os.path.join(out, "checkpoint_final.json"), {"run_config": config.as_env(), "step": config.steps})
    logger.info(f"Training finished; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args):
    if args.episodes < 0:
        raise ContractError(f"--episodes must be >= 0, got {args.episodes}")
    if args.max_steps is not None and args.max_steps < 1:
        raise ContractError(f"--max-steps must be >= 1, got {args.max_steps}")
    config, env, agent = load_agent(args.checkpoint)
    seed = config.seed if args.seed is None else args.seed
    report = evaluate(agent, env, args.episodes, make_streams(seed), max_steps=args.max_steps)
    report["checkpoint"] = args.checkpoint
    report["max_steps"] = args.max_steps
    text = json.dumps(report, indent=2)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.json"), "w") as f:
            f.write(text)
    print(text)
    return EXIT_OK


def cmd_psrf_trace(args):
    config, env, agent = load_agent(args.checkpoint)
    if args.steps < 2:
        raise ContractError(f"--steps must be >= 2, got {args.steps}")
    streams = make_streams(config.seed if args.seed is None else args.seed)
    out = _output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    path = os.path.join(out, "psrf_trace.csv")
    log = CsvLog(path, ["step", "N", "R_p", "lambda_max"])
    try:
        s = env.reset()
        for decision in range(max(args.episodes, 1)):
            a0 = agent.memory.sample(agent.config.n_beliefs, streams["memory"])
            chain = simulate_chain(agent.policy, s, a0, args.steps, streams["policy_noise"])
            for n in range(2, args.steps + 1):
                try:
                    report = grdiag.psrf(chain.steps[:n], agent.convergence.brooks_gelman)
                    log.write({"step": decision, "N": n, "R_p": report.r_p, "lambda_max": report.lambda_max})
                except DegenerateCovarianceError:
                    log.write({"step": decision, "N": n, "R_p": "", "lambda_max": ""})
            agent.memory.push(chain.final)
    finally:
        log.close()
    logger.info(f"PSRF trace written to {path}")
    return EXIT_OK


def cmd_transition_matrix(args):
    config, env, agent = load_agent(args.checkpoint)
    streams = make_streams(config.seed if args.seed is None else args.seed)
    matrix, undefined = quantized_transition_matrix(agent.policy, env, args.samples, streams["eval"])
    out = _output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    path = os.path.join(out, "transition_matrix.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["goal", *[f"to_{j}" for j in range(env.n_goals)], "undefined"])
        for g, row in enumerate(matrix):
            writer.writerow([g, *[_nan_to_blank(float(p)) for p in row], int(g in undefined)])
    if args.png:
        render.save_png(render.matrix_image(matrix), os.path.join(out, "transition_matrix.png"))
    logger.info(f"Transition matrix written to {path}")
    print(np.array2string(matrix, precision=4))
    return EXIT_OK


def cmd_ss_hist(args):
    config, env, agent = load_agent(args.checkpoint)
    if env.action_dim != 1:
        raise ContractError(f"ss-hist needs a 1-D environment, got {env.action_dim}-D actions")
    if args.bins < 1 or args.samples < 1:
        raise ContractError("--bins and --samples must be positive")
    streams = make_streams(config.seed if args.seed is None else args.seed)
    s = env.reset()
    samples = agent.sample_steady_state(s, args.samples, streams["policy_noise"], streams["memory"])

    oracle = CanonicalOracle(alpha=agent.temperature.alpha)
    if args.oracle == "critic":
        q_fn = lambda a: q_eval(agent.critic, s, a).aggregate
    else:
        q_fn = lambda a: env.reward(env.from_cube(a))
    grid, density = canonical_density(oracle, q_fn)
    edges = np.linspace(-1.0, 1.0, args.bins + 1)
    empirical = empirical_masses(samples, edges)
    canonical = bin_masses(grid, density, edges)
    tv = tv_distance(empirical, canonical)

    out = _output_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    path = os.path.join(out, "ss_hist.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "empirical", "canonical"])
        for lo, hi, p, q in zip(edges[:-1], edges[1:], empirical, canonical):
            writer.writerow([lo, hi, p, q])
    if args.png:
        render.save_png(render.histogram_image(empirical, canonical), os.path.join(out, "ss_hist.png"))
    logger.info(f"Steady-state histogram written to {path}; TV distance to the {args.oracle} oracle: {tv:.4f}")
    print(json.dumps({"tv_distance": tv, "oracle": args.oracle, "samples": args.samples, "bins": args.bins}))
    return EXIT_OK


# =============================================================================
# Entry point
# =============================================================================

def build_parser():
    parser = argparse.ArgumentParser(prog="sspg", description="Serial reasoning agent for maximum-entropy RL")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train an agent from a run config")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.set_defaults(func=cmd_train)

    evaluate_cmd = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--episodes", type=int, default=100)
    evaluate_cmd.add_argument("--max-steps", type=int, dest="max_steps")
    evaluate_cmd.add_argument("--seed", type=int)
    evaluate_cmd.add_argument("--out")
    evaluate_cmd.set_defaults(func=cmd_eval)

    analyze = commands.add_parser("analyze", help="analysis artifacts from a checkpoint")
    kinds = analyze.add_subparsers(dest="analysis", required=True)

    trace = kinds.add_parser("psrf-trace")
    trace.add_argument("--checkpoint", required=True)
    trace.add_argument("--steps", type=int, default=64)
    trace.add_argument("--episodes", type=int, default=1)
    trace.add_argument("--seed", type=int)
    trace.add_argument("--out")
    trace.set_defaults(func=cmd_psrf_trace)

    matrix = kinds.add_parser("transition-matrix")
    matrix.add_argument("--checkpoint", required=True)
    matrix.add_argument("--samples", type=int, default=1000)
    matrix.add_argument("--seed", type=int)
    matrix.add_argument("--out")
    matrix.add_argument("--png", action="store_true")
    matrix.set_defaults(func=cmd_transition_matrix)

    hist = kinds.add_parser("ss-hist")
    hist.add_argument("--checkpoint", required=True)
    hist.add_argument("--bins", type=int, default=50)
    hist.add_argument("--samples", type=int, default=10000)
    hist.add_argument("--oracle", choices=("critic", "reward"), default="critic")
    hist.add_argument("--seed", type=int)
    hist.add_argument("--out")
    hist.add_argument("--png", action="store_true")
    hist.set_defaults(func=cmd_ss_hist)
    return parser


def main(argv=None):
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    level = logging.DEBUG if args.verbose else getattr(logging, os.getenv("SSPG_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", level=level)

    try:
        return args.func(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {e} {e.payload}")
        return EXIT_NUMERIC
    except SSPGError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_UNEXPECTED
