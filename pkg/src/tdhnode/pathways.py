"""Pathway definition files: loading, bundled defaults, content hashing.

A pathway file is a TOML document with a ``markers`` array fixing the marker
universe (and index order) and one ``[[pathways]]`` table per trajectory.
Two sets ship with the package: ``diabetes`` (21 markers, 10 pathways) and
``cardiovascular`` (5 markers, 3 pathways).
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .hypergraph import ProgressionHypergraph, build_progression_hypergraph

BUNDLED = ("diabetes", "cardiovascular")


@dataclass(frozen=True)
class PathwaySet:
    """A named marker universe plus its ordered trajectory definitions."""

    name: str
    marker_names: tuple[str, ...]
    trajectories: tuple[tuple[str, ...], ...]

    def build(self) -> ProgressionHypergraph:
        return build_progression_hypergraph(self.trajectories, self.marker_names)

    def content_hash(self) -> str:
        """Stable sha256 over the canonical JSON form of the definitions."""
        canonical = json.dumps(
            {"markers": list(self.marker_names),
             "pathways": [list(t) for t in self.trajectories]},
            sort_keys=True,
        )
        return hashlib.sha256(canonical.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "markers": list(self.marker_names),
            "pathways": [list(t) for t in self.trajectories],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PathwaySet":
        return cls(
            name=data.get("name", "unnamed"),
            marker_names=tuple(data["markers"]),
            trajectories=tuple(tuple(p) for p in data["pathways"]),
        )


def _parse_toml(text: str, name_hint: str) -> PathwaySet:
    doc = tomllib.loads(text)
    markers = tuple(doc["markers"])
    trajectories = tuple(tuple(p["markers"]) for p in doc["pathways"])
    return PathwaySet(doc.get("name", name_hint), markers, trajectories)


def load_pathway_file(path: str | Path) -> PathwaySet:
    path = Path(path)
    return _parse_toml(path.read_text(), path.stem)


def bundled_pathways(name: str) -> PathwaySet:
    if name not in BUNDLED:
        raise KeyError(f"no bundled pathway set named {name!r}; have {BUNDLED}")
    text = resources.files("tdhnode.configs").joinpath(f"{name}.toml").read_text()
    return _parse_toml(text, name)


def resolve_pathways(source: str | Path) -> PathwaySet:
    """Resolve a bundled set name or a path to a pathway TOML file."""
    if isinstance(source, str) and source in BUNDLED:
        return bundled_pathways(source)
    return load_pathway_file(source)
