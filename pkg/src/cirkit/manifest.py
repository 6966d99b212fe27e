"""Run manifests: content hashes of inputs and outputs plus the resolved config.

Reruns with identical inputs and seeds must reproduce identical output
hashes; the manifest is what makes that checkable. Wall-clock timings are
recorded for operators but are not part of any determinism comparison.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int | None = None
    inputs: dict[str, dict] = field(default_factory=dict)
    outputs: dict[str, dict] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    _marks: dict[str, float] = field(default_factory=dict, repr=False)

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def start(self, phase: str) -> None:
        self._marks[phase] = time.perf_counter()

    def stop(self, phase: str) -> None:
        self.timings[phase] = time.perf_counter() - self._marks.pop(phase)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": self.timings,
        }

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def output_hashes(manifest: dict) -> dict[str, str]:
    return {name: rec["sha256"] for name, rec in manifest.get("outputs", {}).items()}
