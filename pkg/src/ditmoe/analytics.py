"""Expert-usage analytics over routing traces.

A trace row records one token's routed-expert selections at one layer of
one forward pass.  Traces round-trip through a small CSV format and feed
two usage views: per-class distinct-expert counts and per-expert
activation frequencies, both per MoE layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "TraceTable",
    "UsageReport",
    "trace_table",
    "concat_tables",
    "write_traces",
    "read_traces",
    "analyze_usage",
    "write_report",
]

TRACE_HEADER = "step,layer,image,class,timestep,token,experts"


@dataclass
class TraceTable:
    """Flat row-per-token view of a batch of routing traces."""

    step: np.ndarray       # (rows,) int
    layer: np.ndarray      # (rows,) int
    image: np.ndarray      # (rows,) int, global image id
    label: np.ndarray      # (rows,) int class label
    timestep: np.ndarray   # (rows,) float diffusion time
    token: np.ndarray      # (rows,) int position within the image
    experts: np.ndarray    # (rows, k) int selected expert ids
    n_routed: int

    @property
    def rows(self) -> int:
        return self.experts.shape[0]

    @property
    def k(self) -> int:
        return self.experts.shape[1] if self.experts.ndim == 2 else 0


@dataclass
class UsageReport:
    layers: list           # MoE layer indices, sorted
    classes: list          # class labels present, sorted
    n_routed: int
    k: int
    per_class: np.ndarray  # (layers, classes) mean distinct experts per image
    per_expert: np.ndarray  # (layers, n_routed) per-token activation frequency
    flags: list            # human-readable anomaly notes

    @property
    def unused_experts(self) -> list:
        return [e for e in range(self.n_routed)
                if np.all(self.per_expert[:, e] == 0.0)]


def trace_table(traces, image_offset: int = 0) -> TraceTable:
    """Flatten RoutingTrace objects from one forward/sampling call.

    Image ids are the batch positions plus `image_offset`, so traces from
    every layer and sampler step of one call share image identities."""
    if not traces:
        raise ValueError("empty trace set")
    cols = {name: [] for name in
            ("step", "layer", "image", "label", "timestep", "token")}
    experts = []
    n_routed = max(t.n_routed for t in traces)
    for t in traces:
        rows, k = t.selected.shape
        per_item = t.tokens_per_item if t.tokens_per_item else rows
        batch = rows // per_item
        if t.classes is None or t.timesteps is None:
            raise ValueError("trace lacks class/timestep annotations")
        item = np.repeat(np.arange(batch), per_item)
        cols["step"].append(np.full(rows, t.step, dtype=np.int64))
        cols["layer"].append(np.full(rows, t.layer, dtype=np.int64))
        cols["image"].append(item + image_offset)
        cols["label"].append(np.asarray(t.classes, dtype=np.int64)[item])
        cols["timestep"].append(np.asarray(t.timesteps, dtype=np.float64)[item])
        cols["token"].append(np.tile(np.arange(per_item), batch))
        experts.append(np.asarray(t.selected, dtype=np.int64))
    return TraceTable(
        step=np.concatenate(cols["step"]),
        layer=np.concatenate(cols["layer"]),
        image=np.concatenate(cols["image"]),
        label=np.concatenate(cols["label"]),
        timestep=np.concatenate(cols["timestep"]),
        token=np.concatenate(cols["token"]),
        experts=np.concatenate(experts, axis=0),
        n_routed=n_routed,
    )


def concat_tables(tables) -> TraceTable:
    """Stack tables, shifting image ids so they stay distinct per table."""
    tables = list(tables)
    if not tables:
        raise ValueError("empty trace set")
    shifted = []
    offset = 0
    for t in tables:
        shifted.append(t.image + offset)
        if t.rows:
            offset += int(t.image.max()) + 1
    return TraceTable(
        step=np.concatenate([t.step for t in tables]),
        layer=np.concatenate([t.layer for t in tables]),
        image=np.concatenate(shifted),
        label=np.concatenate([t.label for t in tables]),
        timestep=np.concatenate([t.timestep for t in tables]),
        token=np.concatenate([t.token for t in tables]),
        experts=np.concatenate([t.experts for t in tables], axis=0),
        n_routed=max(t.n_routed for t in tables),
    )


def write_traces(table: TraceTable, path):
    lines = [f"# routing trace v1 n_routed={table.n_routed}", TRACE_HEADER]
    for i in range(table.rows):
        picks = " ".join(str(e) for e in table.experts[i])
        lines.append(f"{table.step[i]},{table.layer[i]},{table.image[i]},"
                     f"{table.label[i]},{table.timestep[i]:.17g},"
                     f"{table.token[i]},{picks}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_traces(path) -> TraceTable:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# routing trace v1"):
        raise ValueError(f"{path}: not a routing trace file")
    n_routed = int(lines[0].rsplit("n_routed=", 1)[1])
    if len(lines) < 2 or lines[1] != TRACE_HEADER:
        raise ValueError(f"{path}: missing trace header row")
    cols = ([], [], [], [], [], [])
    experts = []
    for line in lines[2:]:
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != 7:
            raise ValueError(f"{path}: malformed trace row {line!r}")
        for out, cell in zip(cols, cells[:6]):
            out.append(cell)
        experts.append([int(e) for e in cells[6].split()])
    return TraceTable(
        step=np.array(cols[0], dtype=np.int64),
        layer=np.array(cols[1], dtype=np.int64),
        image=np.array(cols[2], dtype=np.int64),
        label=np.array(cols[3], dtype=np.int64),
        timestep=np.array(cols[4], dtype=np.float64),
        token=np.array(cols[5], dtype=np.int64),
        experts=(np.array(experts, dtype=np.int64)
                 if experts else np.zeros((0, 0), dtype=np.int64)),
        n_routed=n_routed,
    )


def analyze_usage(table: TraceTable) -> UsageReport:
    """Build both usage matrices.

    per_class[l, c]: number of distinct routed experts an image of class
    c activates in layer l (over its whole trajectory), averaged over the
    class's images.  per_expert[l, e]: fraction of layer-l tokens that
    activate expert e, computed per class and averaged over classes with
    equal weight; each row sums to k (every token activates k experts)."""
    if table.rows == 0:
        raise ValueError("empty trace set")
    layers = sorted(int(x) for x in np.unique(table.layer))
    classes = sorted(int(x) for x in np.unique(table.label))
    n = table.n_routed
    per_class = np.zeros((len(layers), len(classes)))
    per_expert = np.zeros((len(layers), n))
    for li, layer in enumerate(layers):
        in_layer = table.layer == layer
        for ci, cls in enumerate(classes):
            rows = in_layer & (table.label == cls)
            picks = table.experts[rows]
            if picks.size == 0:
                continue
            images = table.image[rows]
            distinct = [len(np.unique(picks[images == img]))
                        for img in np.unique(images)]
            per_class[li, ci] = float(np.mean(distinct))
            counts = np.bincount(picks.reshape(-1), minlength=n)
            per_expert[li] += counts / picks.shape[0]
        per_expert[li] /= len(classes)
    flags = [f"unused expert {e}" for e in range(n)
             if np.all(per_expert[:, e] == 0.0)]
    return UsageReport(layers=layers, classes=classes, n_routed=n,
                       k=table.k, per_class=per_class,
                       per_expert=per_expert, flags=flags)


def write_report(report: UsageReport, out_dir):
    """Emit the two usage matrices as CSVs; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    a_path = out_dir / "usage_per_class.csv"
    lines = ["# distinct routed experts activated per image "
             "(whole trajectory), averaged over each class's images",
             "layer," + ",".join(str(c) for c in report.classes)]
    for li, layer in enumerate(report.layers):
        cells = ",".join(f"{v:.10g}" for v in report.per_class[li])
        lines.append(f"{layer},{cells}")
    a_path.write_text("\n".join(lines) + "\n")

    b_path = out_dir / "usage_per_expert.csv"
    lines = ["# per-token activation frequency of each routed expert, "
             "averaged over classes with equal weight",
             f"# each row sums to k={report.k} "
             "(every token activates k experts)",
             "# flags: " + ("; ".join(report.flags) if report.flags else "none"),
             "layer," + ",".join(f"expert_{e}" for e in range(report.n_routed))]
    for li, layer in enumerate(report.layers):
        cells = ",".join(f"{v:.10g}" for v in report.per_expert[li])
        lines.append(f"{layer},{cells}")
    b_path.write_text("\n".join(lines) + "\n")
    return a_path, b_path
