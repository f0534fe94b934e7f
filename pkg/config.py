"""
Run configuration
Flat KEY=value run files (ENV_*, AGENT_*, RUN_* sections) parsed with
python-dotenv, validated into a RunConfig, echoed back fully resolved.
"""
import logging
import math
import os
import re
from dataclasses import dataclass, field, fields, replace

import numpy as np
from dotenv import dotenv_values, set_key

from agent import AgentConfig
from envs import circle_goals, make_bandit
from errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("ENV_KIND", "ENV_GOALS")
ENV_KINDS = ("bandit_1d", "bandit_2d")
STREAM_NAMES = ("init", "env", "policy_noise", "buffer", "memory", "explore", "eval")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_widths(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_goals(text):
    """`circle:G` or `x[,y];x[,y];...`."""
    text = text.strip()
    if text.startswith("circle:"):
        return "circle", int(text.split(":", 1)[1])
    points = [[float(c) for c in point.split(",")] for point in text.split(";") if point.strip()]
    if not points or len({len(p) for p in points}) != 1:
        raise ValueError(f"goals must be ';'-separated points of equal dimension, got {text!r}")
    return "points", np.asarray(points, dtype=np.float64)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, np.ndarray):
        return ";".join(",".join(repr(float(c)) for c in row) for row in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _agent_keys():
    """AGENT_<FIELD> -> (field name, parser) for every AgentConfig field."""
    keys = {}
    for f in fields(AgentConfig):
        default = f.default
        if isinstance(default, bool):
            parser = _parse_bool
        elif isinstance(default, int):
            parser = int
        elif isinstance(default, float):
            parser = float
        elif isinstance(default, tuple):
            parser = _parse_widths
        else:
            parser = str
        keys[f"AGENT_{f.name.upper()}"] = (f.name, parser)
    return keys


AGENT_KEYS = _agent_keys()

ENV_KEYS = {
    "ENV_KIND": str,
    "ENV_GOALS": _parse_goals,
    "ENV_GOAL_RADIUS": float,
    "ENV_VISIT_RADIUS": float,
}

RUN_KEYS = {
    "RUN_SEED": int,
    "RUN_STEPS": int,
    "RUN_EVAL_EVERY": int,
    "RUN_EVAL_EPISODES": int,
    "RUN_CHECKPOINT_EVERY": int,
    "RUN_LOG_EVERY": int,
    "RUN_OUTPUT_DIR": str,
}


@dataclass
class RunConfig:
    env_kind: str
    goals: np.ndarray
    agent: AgentConfig = field(default_factory=AgentConfig)
    goal_radius: float = 0.6
    visit_radius: float = 0.2
    seed: int = 0
    steps: int = 1000
    eval_every: int = 0
    eval_episodes: int = 100
    checkpoint_every: int = 0
    log_every: int = 100
    output_dir: str = "runs/default"

    def make_env(self):
        return make_bandit(self.env_kind, goals=self.goals, visit_radius=self.visit_radius)

    def as_env(self):
        """Every key with its resolved value, in file order."""
        values = {
            "ENV_KIND": self.env_kind,
            "ENV_GOALS": self.goals,
            "ENV_GOAL_RADIUS": self.goal_radius,
            "ENV_VISIT_RADIUS": self.visit_radius,
        }
        for key, (name, _) in AGENT_KEYS.items():
            values[key] = getattr(self.agent, name)
        values.update({
            "RUN_SEED": self.seed,
            "RUN_STEPS": self.steps,
            "RUN_EVAL_EVERY": self.eval_every,
            "RUN_EVAL_EPISODES": self.eval_episodes,
            "RUN_CHECKPOINT_EVERY": self.checkpoint_every,
            "RUN_LOG_EVERY": self.log_every,
            "RUN_OUTPUT_DIR": self.output_dir,
        })
        return {key: _format(value) for key, value in values.items()}

    def write_resolved(self, path):
        """Echo the resolved config as a dotenv file (overwrites)."""
        open(path, "w").close()
        for key, value in self.as_env().items():
            set_key(path, key, value, quote_mode="never")
        logger.info(f"Resolved config written to {path}")


def _key_lines(path):
    lines = {}
    pattern = re.compile(r"^\s*(?:export\s+)?([A-Za-z_][A-Za-z0-9_]*)\s*=")
    with open(path, "r") as f:
        for number, text in enumerate(f, start=1):
            match = pattern.match(text)
            if match:
                lines.setdefault(match.group(1), number)
    return lines


def parse_config(raw, lines=None):
    """RunConfig from a {KEY: text} mapping; errors name the key and its line."""
    lines = lines or {}

    def fail(key, message):
        where = f" (line {lines[key]})" if key in lines else ""
        raise ConfigError(f"{key}{where}: {message}", key=key, line=lines.get(key))

    for key in REQUIRED_KEYS:
        if key not in raw or raw[key] is None or not str(raw[key]).strip():
            fail(key, "missing required key")

    parsers = {**ENV_KEYS, **{k: p for k, (_, p) in AGENT_KEYS.items()}, **RUN_KEYS}
    parsed = {}
    for key, text in raw.items():
        if key not in parsers:
            fail(key, "unknown key")
        if text is None:
            fail(key, "has no value")
        try:
            parsed[key] = parsers[key](text)
        except (ValueError, IndexError) as e:
            fail(key, f"malformed value {text!r}: {e}")

    kind = parsed["ENV_KIND"]
    if kind not in ENV_KINDS:
        fail("ENV_KIND", f"must be one of {ENV_KINDS}, got {kind!r}")
    goal_radius = parsed.get("ENV_GOAL_RADIUS", 0.6)
    mode, goals = parsed["ENV_GOALS"]
    if mode == "circle":
        if kind != "bandit_2d":
            fail("ENV_GOALS", "circle goals need ENV_KIND=bandit_2d")
        if goals < 1:
            fail("ENV_GOALS", f"need at least one goal, got {goals}")
        goals = circle_goals(goals, goal_radius)
    expected_dim = 1 if kind == "bandit_1d" else 2
    if goals.shape[1] != expected_dim:
        fail("ENV_GOALS", f"{kind} needs {expected_dim}-D goals, got {goals.shape[1]}-D")

    agent_values = {name: parsed[key] for key, (name, _) in AGENT_KEYS.items() if key in parsed}
    try:
        agent = AgentConfig(**agent_values)
    except ContractError as e:
        culprit = next(
            (k for k, (name, _) in AGENT_KEYS.items() if k in parsed and re.search(rf"\b{name}\b", str(e))), "AGENT"
        )
        fail(culprit, str(e))
    target_entropy = -float(expected_dim) if math.isnan(agent.target_entropy) else agent.target_entropy
    agent = replace(
        agent,
        memory_size=agent.resolved_memory_size(),
        beta=agent.resolved_beta(),
        target_entropy=target_entropy,
    )

    config = RunConfig(
        env_kind=kind,
        goals=goals,
        agent=agent,
        goal_radius=goal_radius,
        visit_radius=parsed.get("ENV_VISIT_RADIUS", 0.2),
        seed=parsed.get("RUN_SEED", 0),
        steps=parsed.get("RUN_STEPS", 1000),
        eval_every=parsed.get("RUN_EVAL_EVERY", 0),
        eval_episodes=parsed.get("RUN_EVAL_EPISODES", 100),
        checkpoint_every=parsed.get("RUN_CHECKPOINT_EVERY", 0),
        log_every=parsed.get("RUN_LOG_EVERY", 100),
        output_dir=parsed.get("RUN_OUTPUT_DIR", "runs/default"),
    )
    for key, name in (("RUN_STEPS", "steps"), ("RUN_EVAL_EVERY", "eval_every"),
                      ("RUN_EVAL_EPISODES", "eval_episodes"), ("RUN_CHECKPOINT_EVERY", "checkpoint_every"),
                      ("RUN_LOG_EVERY", "log_every")):
        if getattr(config, name) < 0:
            fail(key, "must be >= 0")
    try:
        config.make_env()
    except ContractError as e:
        fail("ENV_GOALS", str(e))
    return config


def load_config(path, seed=None, output_dir=None):
    """Parse a run file; --seed / --out style overrides win over the file."""
    if not os.path.isfile(path):
        raise ConfigError(f"Config file {path} does not exist")
    config = parse_config(dotenv_values(path), _key_lines(path))
    if seed is not None:
        config.seed = seed
    if output_dir is not None:
        config.output_dir = output_dir
    return config


def make_streams(seed):
    """Independent named generators spawned from one seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        for i, name in enumerate(STREAM_NAMES)
    }
