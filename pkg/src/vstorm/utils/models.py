"""
Data Models

Report and manifest records shared by training, evaluation and the CLI.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

from ..config import MANIFEST_SECTION

HISTORY_COLUMNS = ("stage", "epoch", "bin_size", "total", "data", "kl", "penalty", "smoothness")
METRIC_COLUMNS = ("frame", "slice", "metric", "value")


@dataclass
class EpochRecord:
    """Loss terms summed over one epoch."""

    stage: int
    epoch: int
    bin_size: int
    total: float
    data: float
    kl: float
    penalty: float
    smoothness: float

    def to_dict(self):
        return {name: getattr(self, name) for name in HISTORY_COLUMNS}

    @classmethod
    def from_dict(cls, data):
        return cls(
            stage=int(data["stage"]),
            epoch=int(data["epoch"]),
            bin_size=int(data["bin_size"]),
            total=float(data["total"]),
            data=float(data["data"]),
            kl=float(data["kl"]),
            penalty=float(data["penalty"]),
            smoothness=float(data["smoothness"]),
        )


@dataclass
class TrainReport:
    """Per-epoch history of a training run."""

    history: list = field(default_factory=list)
    mode: str = "variational"
    seed: int = 0
    wall_time: float = field(default=0.0, compare=False)
    final_metrics: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.history[-1] if self.history else None

    def stage_records(self, stage):
        return [r for r in self.history if r.stage == stage]

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(HISTORY_COLUMNS)
            for record in self.history:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in record.to_dict().values()])

    @classmethod
    def from_csv(cls, path, mode="variational", seed=0):
        with open(path, newline="") as f:
            history = [EpochRecord.from_dict(row) for row in csv.DictReader(f)]
        return cls(history=history, mode=mode, seed=seed)


@dataclass
class MetricRecord:
    frame: int
    slice: int
    metric: str
    value: float


@dataclass
class MetricReport:
    """Per-frame metric rows plus aggregates (means of per-frame values)."""

    records: list = field(default_factory=list)
    kl_per_slice: list = field(default_factory=list)
    alignment: float | None = None

    def add(self, frame, slice_index, metric, value):
        self.records.append(MetricRecord(frame, slice_index, metric, float(value)))

    def values(self, metric):
        return [r.value for r in self.records if r.metric == metric]

    def aggregate(self, metric):
        values = self.values(metric)
        return sum(values) / len(values) if values else float("nan")

    @property
    def metrics(self):
        return sorted({r.metric for r in self.records})

    def to_csv(self, path):
        """Rows (frame, slice, metric, value); aggregates use frame -1."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(METRIC_COLUMNS)
            for r in self.records:
                writer.writerow([r.frame, r.slice, r.metric, repr(r.value)])
            for metric in self.metrics:
                writer.writerow([-1, -1, f"mean_{metric}", repr(self.aggregate(metric))])
            for z, value in enumerate(self.kl_per_slice):
                writer.writerow([-1, z, "kl", repr(float(value))])
            if self.alignment is not None:
                writer.writerow([-1, -1, "alignment", repr(float(self.alignment))])


@dataclass
class RunManifest:
    """What a command ran with and what it wrote."""

    command: str
    config_path: str
    config_text: str
    seed: int
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    checkpoint: str = ""
    version: str = ""

    def to_text(self):
        lines = [
            f"command = {self.command}",
            f"config_path = {self.config_path}",
            f"seed = {self.seed}",
            f"inputs = {','.join(self.inputs)}",
            f"outputs = {','.join(self.outputs)}",
            f"checkpoint = {self.checkpoint}",
            f"version = {self.version}",
            MANIFEST_SECTION,
            self.config_text.rstrip("\n"),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        head, _, config_text = text.partition(MANIFEST_SECTION + "\n")
        values = {}
        for line in head.splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
        return cls(
            command=values.get("command", ""),
            config_path=values.get("config_path", ""),
            config_text=config_text,
            seed=int(values.get("seed", 0)),
            inputs=[p for p in values.get("inputs", "").split(",") if p],
            outputs=[p for p in values.get("outputs", "").split(",") if p],
            checkpoint=values.get("checkpoint", ""),
            version=values.get("version", ""),
        )

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path
