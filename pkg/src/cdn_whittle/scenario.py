"""Scenario files: YAML documents describing a topology plus experiment and
index settings. Parsing works on the composed node tree so that every
diagnostic carries a line number."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .model import CostFunction, FileType, NetworkTopology, Server, validate_topology
from .policies import POLICY_NAMES, RESERVED_POLICY_NAMES

SCHEMA_VERSION = 1
PRESETS = ("fig3", "fig5", "fig5-chain", "fig10", "mm1")


class ScenarioError(ValueError):
    """Parse or validation failure; ``problems`` lists every diagnostic."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


@dataclass
class ExperimentSpec:
    policies: list[str] = field(default_factory=lambda: ["whittle", "uniform", "random", "weighted", "max_weight"])
    horizon: float = 1e5
    warmup: float | None = None
    replications: int = 20
    seed: int = 12345


@dataclass
class IndexSpec:
    method: str = "direct"
    eta: float = 0.01
    tol: float = 1e-6
    n_max: int = 200
    max_queue: int = 50


@dataclass
class OptimalSpec:
    buffer: int = 60
    tol: float = 1e-8


@dataclass
class Scenario:
    name: str
    topology: NetworkTopology
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    index: IndexSpec = field(default_factory=IndexSpec)
    optimal: OptimalSpec = field(default_factory=OptimalSpec)
    description: str = ""

    def to_dict(self) -> dict:
        topo = self.topology
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "description": self.description,
            "files": [{"id": f.id, "lambda": f.arrival_rate, "cost": f.cost.to_dict()} for f in topo.files],
            "servers": [{"id": s.id, "mu": s.capacity} for s in topo.servers],
            "edges": [{"file": i, "server": j} for i, j in topo.edges],
            "experiment": asdict(self.experiment),
            "index": asdict(self.index),
            "optimal": asdict(self.optimal),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


# ----------------------------------------------------------------------------
# node-level reading


class _Reader:
    def __init__(self, loader: yaml.SafeLoader):
        self.loader = loader
        self.problems: list[str] = []

    def where(self, node) -> str:
        return f"line {node.start_mark.line + 1}"

    def fail(self, node, msg: str):
        self.problems.append(f"{self.where(node)}: {msg}")

    def mapping(self, node, ctx: str, allowed: tuple[str, ...], required: tuple[str, ...] = ()) -> dict:
        if not isinstance(node, yaml.MappingNode):
            self.fail(node, f"{ctx} must be a mapping")
            return {}
        out = {}
        for knode, vnode in node.value:
            key = knode.value
            if key not in allowed:
                self.fail(knode, f"unknown key {key!r} in {ctx} (allowed: {', '.join(allowed)})")
            elif key in out:
                self.fail(knode, f"duplicate key {key!r} in {ctx}")
            else:
                out[key] = vnode
        for key in required:
            if key not in out:
                self.fail(node, f"{ctx} is missing required key {key!r}")
        return out

    def sequence(self, node, ctx: str) -> list:
        if not isinstance(node, yaml.SequenceNode):
            self.fail(node, f"{ctx} must be a list")
            return []
        return list(node.value)

    def value(self, node):
        return self.loader.construct_object(node, deep=True)

    def number(self, node, ctx: str, kind=float, default=None):
        if node is None:
            return default
        raw = self.value(node)
        if isinstance(raw, bool):
            self.fail(node, f"{ctx} must be a number, got {raw!r}")
            return default
        try:
            # YAML 1.1 reads '1e-6' as a string
            val = kind(float(raw)) if kind is int else float(raw)
        except (TypeError, ValueError):
            self.fail(node, f"{ctx} must be a number, got {raw!r}")
            return default
        if kind is int and float(raw) != val:
            self.fail(node, f"{ctx} must be an integer, got {raw!r}")
        return val

    def text(self, node, ctx: str, default=""):
        if node is None:
            return default
        raw = self.value(node)
        if not isinstance(raw, str):
            self.fail(node, f"{ctx} must be a string")
            return default
        return raw


def _read_cost(rd: _Reader, node, ctx: str):
    m = rd.mapping(node, ctx, ("kind", "coeffs"), ("kind", "coeffs"))
    if "kind" not in m or "coeffs" not in m:
        return None
    kind = rd.text(m["kind"], f"{ctx}.kind")
    coeffs = [rd.number(c, f"{ctx}.coeffs[{n}]") for n, c in enumerate(rd.sequence(m["coeffs"], f"{ctx}.coeffs"))]
    if any(c is None for c in coeffs):
        return None
    try:
        return CostFunction(kind, tuple(coeffs))
    except ValueError as exc:
        rd.fail(node, f"{ctx}: {exc}")
        return None


def _read_spec(rd: _Reader, node, ctx: str, spec, ints=(), texts=(), lists=()):
    names = tuple(spec.__dataclass_fields__)
    m = rd.mapping(node, ctx, names)
    for key, vnode in m.items():
        if key in texts:
            setattr(spec, key, rd.text(vnode, f"{ctx}.{key}"))
        elif key in lists:
            setattr(spec, key, [rd.text(v, f"{ctx}.{key}[{n}]") for n, v in enumerate(rd.sequence(vnode, f"{ctx}.{key}"))])
        elif rd.value(vnode) is None:
            setattr(spec, key, None)
        else:
            setattr(spec, key, rd.number(vnode, f"{ctx}.{key}", int if key in ints else float))
    return spec, m


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse and validate a scenario document; raises :class:`ScenarioError`."""
    loader = yaml.SafeLoader(text)
    try:
        root = loader.get_single_node()
    except yaml.YAMLError as exc:
        raise ScenarioError([f"{source}: YAML syntax error: {exc}"]) from None
    if root is None:
        raise ScenarioError([f"{source}: empty scenario"])
    rd = _Reader(loader)
    top = rd.mapping(
        root,
        "scenario",
        ("schema_version", "name", "description", "files", "servers", "edges", "experiment", "index", "optimal"),
        ("schema_version", "files", "servers", "edges"),
    )
    if "schema_version" in top:
        version = rd.number(top["schema_version"], "schema_version", int)
        if version is not None and version != SCHEMA_VERSION:
            rd.fail(top["schema_version"], f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")

    files = []
    for n, fnode in enumerate(rd.sequence(top["files"], "files") if "files" in top else []):
        m = rd.mapping(fnode, f"files[{n}]", ("id", "lambda", "cost"), ("id", "lambda", "cost"))
        fid = rd.number(m.get("id"), f"files[{n}].id", int)
        lam = rd.number(m.get("lambda"), f"files[{n}].lambda")
        cost = _read_cost(rd, m["cost"], f"files[{n}].cost") if "cost" in m else None
        if None not in (fid, lam, cost):
            files.append(FileType(fid, lam, cost))
    servers = []
    for n, snode in enumerate(rd.sequence(top["servers"], "servers") if "servers" in top else []):
        m = rd.mapping(snode, f"servers[{n}]", ("id", "mu"), ("id", "mu"))
        sid = rd.number(m.get("id"), f"servers[{n}].id", int)
        mu = rd.number(m.get("mu"), f"servers[{n}].mu")
        if None not in (sid, mu):
            servers.append(Server(sid, mu))
    edges = []
    for n, enode in enumerate(rd.sequence(top["edges"], "edges") if "edges" in top else []):
        m = rd.mapping(enode, f"edges[{n}]", ("file", "server"), ("file", "server"))
        i = rd.number(m.get("file"), f"edges[{n}].file", int)
        j = rd.number(m.get("server"), f"edges[{n}].server", int)
        if None not in (i, j):
            edges.append((i, j))
    if "edges" in top and not edges and not rd.problems:
        rd.fail(top["edges"], "edge list is empty")

    experiment, em = _read_spec(
        rd, top["experiment"], "experiment", ExperimentSpec(), ints=("replications", "seed"), lists=("policies",)
    ) if "experiment" in top else (ExperimentSpec(), {})
    for n, name in enumerate(experiment.policies):
        pnode = em["policies"].value[n] if "policies" in em else None
        if name in RESERVED_POLICY_NAMES:
            rd.fail(pnode, f"policy {name!r} is reserved but not implemented")
        elif name not in POLICY_NAMES:
            rd.fail(pnode, f"unknown policy {name!r} (expected one of {', '.join(POLICY_NAMES)})")
    index, im = _read_spec(rd, top["index"], "index", IndexSpec(), ints=("n_max", "max_queue"), texts=("method",)) if "index" in top else (IndexSpec(), {})
    if index.method not in ("direct", "iterative"):
        rd.fail(im.get("method", root), f"unknown index method {index.method!r}")
    optimal, _ = _read_spec(rd, top["optimal"], "optimal", OptimalSpec(), ints=("buffer",)) if "optimal" in top else (OptimalSpec(), {})

    name = rd.text(top.get("name"), "name", default=Path(source).stem)
    description = rd.text(top.get("description"), "description")
    if rd.problems:
        raise ScenarioError([f"{source}: {p}" for p in rd.problems])
    topology = NetworkTopology(tuple(files), tuple(servers), tuple(edges), name=name)
    report = validate_topology(topology, cost_bound=max(index.n_max, index.max_queue))
    if report:
        raise ScenarioError([f"{source}: invalid topology: {p}" for p in report])
    return Scenario(name, topology, experiment, index, optimal, description)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ScenarioError([f"unknown preset {name!r} (available: {', '.join(PRESETS)})"])
    return Path(str(resources.files("cdn_whittle") / "presets" / f"{name}.yaml"))


def load_scenario(path_or_preset: str | Path) -> Scenario:
    """Load a scenario file, or a bundled preset by name."""
    p = Path(path_or_preset)
    if not p.exists() and str(path_or_preset) in PRESETS:
        p = preset_path(str(path_or_preset))
    if not p.exists():
        raise ScenarioError([f"scenario not found: {path_or_preset}"])
    return parse_scenario(p.read_text(), str(p))
