import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from balweights.helpers.artifacts import atomic_write_text, dumps, to_jsonable, write_json
from balweights.helpers.logger import LOGGER
from balweights.helpers.utils import resolve_threads
from config import DEFAULT_SEED

DEFAULT_OUT = "balweights-out"


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if not isinstance(payload, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return payload


@dataclass(frozen=True)
class RunConfig:
    """A command's configuration: the JSON file with flag overrides applied."""

    command: str
    payload: dict = field(default_factory=dict)
    config_path: Optional[str] = None
    data: Optional[str] = None
    out: str = DEFAULT_OUT
    seed: int = DEFAULT_SEED
    threads: int = 1
    format: str = "json"

    @classmethod
    def resolve(cls, command: str, args) -> "RunConfig":
        payload = load_config(getattr(args, "config", None))

        def pick(name, default):
            flag = getattr(args, name, None)
            return flag if flag is not None else payload.get(name, default)

        seed = pick("seed", DEFAULT_SEED)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {seed!r}")
        fmt = pick("format", "json")
        if fmt not in ("json", "text"):
            raise ValueError(f"format must be json or text, got {fmt!r}")
        return cls(
            command=command,
            payload=payload,
            config_path=getattr(args, "config", None),
            data=pick("data", None),
            out=pick("out", DEFAULT_OUT),
            seed=seed,
            threads=resolve_threads(pick("threads", None)),
            format=fmt,
        )

    def section(self, key: str, default=None):
        value = self.payload.get(key, default)
        return {} if value is None else value

    @property
    def resolved(self) -> dict:
        return {**self.payload, "data": self.data, "seed": self.seed, "format": self.format}

    def provenance(self) -> dict:
        from balweights import __version__

        return {"version": __version__, "command": self.command, "config": to_jsonable(self.resolved)}

    def path(self, name: str) -> Path:
        return Path(self.out) / name

    def write_artifact(self, name: str, document: dict) -> Path:
        return write_json(self.path(name), {**document, "run": self.provenance()})

    def text_header(self) -> str:
        provenance = self.provenance()
        config = json.dumps(provenance["config"], sort_keys=True, separators=(",", ":"))
        return f"# balweights {provenance['version']} {self.command}\n# config: {config}\n"

    def write_text(self, name: str, text: str) -> Path:
        body = text if text.endswith("\n") else text + "\n"
        return atomic_write_text(self.path(name), self.text_header() + "\n" + body)

    def emit(self, document: dict, text: str):
        """Print the command's summary in the requested format."""
        if self.format == "text":
            print(text)
        else:
            print(dumps({**document, "run": self.provenance()}), end="")
        LOGGER.info(f"{self.command} finished; artifacts under {self.out}")
