"""
Run Manifest Tracker
Records what produced every artifact: config hash, seeds, paths and versions
"""

import json
import logging
import os

import numpy
import pydantic
import scipy
from pydantic import BaseModel, Field

from config import config_hash
from records import write_text_atomic

logger = logging.getLogger(__name__)

TRINITY_VERSION = "0.1.0"


class RunManifest(BaseModel):
    command: str
    config_hash: str
    seeds: dict[str, int] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    versions: dict[str, str] = Field(default_factory=dict)


def _seeds_of(config, prefix=""):
    """Every `seed` field in a (possibly nested) settings model"""
    seeds = {}
    for name, value in config:
        if isinstance(value, BaseModel):
            seeds.update(_seeds_of(value, f"{prefix}{name}."))
        elif name == "seed":
            seeds[f"{prefix}seed"] = int(value)
    return seeds


class ManifestWriter:
    def __init__(self):
        self.versions = {
            "trinity": TRINITY_VERSION,
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
            "pydantic": pydantic.VERSION,
        }

    def build(self, command, config, inputs=None, outputs=None):
        return RunManifest(
            command=command,
            config_hash=config_hash(config),
            seeds=_seeds_of(config),
            inputs={k: str(v) for k, v in (inputs or {}).items()},
            outputs={k: str(v) for k, v in (outputs or {}).items()},
            versions=dict(self.versions),
        )

    def write(self, manifest, out_dir):
        path = os.path.join(out_dir, f"manifest-{manifest.command}.json")
        write_text_atomic(path, json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        logger.info(f"🧾 Manifest written: {path}")
        return path

    def record(self, command, config, out_dir, inputs=None, outputs=None):
        return self.write(self.build(command, config, inputs, outputs), out_dir)

    def read(self, path):
        with open(path, "r", encoding="utf-8") as f:
            return RunManifest.model_validate(json.load(f))


manifest_writer = ManifestWriter()
