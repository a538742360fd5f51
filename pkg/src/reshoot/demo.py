"""Offline end-to-end harness on mock backends.

Synthesizes a screenplay and tagged stand-in portraits, runs the full remake
plus ablations (no verification loop, global instead of per-shot context),
evaluates each run and writes a comparison report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backends import MockWorld, build_backends
from .backends.mock import mock_layout, render_portrait
from .bench import EvalReport, emit_report, evaluate_run
from .config import RunConfig
from .fixtures import synthesize_dict
from .images import image_size
from .memory import char_stem
from .pipeline import CastEntry, SourceSpec, open_run, run_remake

FULL = "full"
NO_VERIFY = "w/o verification"
GLOBAL_CONTEXT = "w/o dynamic allocation"


@dataclass(frozen=True)
class DemoSettings:
    shots: int = 20
    fault_rate: float = 0.15
    seed: int = 0
    max_retries: int = 3
    scenes: int = 3
    characters: int = 4
    parallelism: int = 4
    no_verify: bool = False
    global_context: bool = False

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if not 0.0 <= self.fault_rate <= 1.0:
            raise ValueError("fault rate must be in [0, 1]")
        if self.max_retries < 0:
            raise ValueError("max retries must be >= 0")

    def variants(self) -> dict[str, dict]:
        """Primary run plus the comparison runs to evaluate."""
        primary = {"max_retries": 0 if self.no_verify else self.max_retries,
                   "global_context": False}
        out = {FULL: primary, NO_VERIFY: {"max_retries": 0, "global_context": False}}
        if self.global_context:
            out[GLOBAL_CONTEXT] = {"max_retries": primary["max_retries"], "global_context": True}
        return out


@dataclass
class DemoResult:
    out_dir: Path
    rows: dict[str, dict] = field(default_factory=dict)  # label -> evaluate_run output
    run_dirs: dict[str, Path] = field(default_factory=dict)

    def metric(self, label: str, name: str) -> float:
        return self.rows[label]["metrics"][name]

    def summary_lines(self) -> list[str]:
        lines = []
        for label, row in self.rows.items():
            m = row["metrics"]
            lines.append(
                f"{label:<24} verified {row['verified']:>3}/{row['total']:<3} "
                f"ID-VLM {m['ID-VLM']:.2f}  Scene-VLM {m['Scene-VLM']:.2f}  "
                f"Plot-VLM {m['Plot-VLM']:.2f}  CLIP-I(ID) {m['CLIP-I (ID)']:.3f}  "
                f"CLIP-I(Scene) {m['CLIP-I (Scene)']:.3f}  consistency {row['consistency']:.3f}"
            )
        return lines


def prepare_inputs(out_dir, settings: DemoSettings) -> SourceSpec:
    """Screenplay file plus one tagged portrait per character."""
    inputs = Path(out_dir) / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)
    doc = synthesize_dict(settings.shots, settings.seed, n_scenes=settings.scenes,
                          n_characters=settings.characters)
    sp_path = inputs / "screenplay.json"
    sp_path.write_text(json.dumps(doc, indent=2) + "\n")
    mapping = {}
    for i, ch in enumerate(doc["characters"], 1):
        cid = ch["character_id"]
        portrait = render_portrait(cid, inputs / "portraits" / f"{char_stem(cid)}.png")
        mapping[cid] = CastEntry(f"Performer {i}", (str(portrait),))
    return SourceSpec(screenplay_path=str(sp_path), character_mapping=mapping,
                      style="realistic cinematic")


def demo_config(settings: DemoSettings, *, max_retries: int, global_context: bool,
                output_dir: str) -> RunConfig:
    return RunConfig().with_overrides(
        seed=settings.seed, max_retries=max_retries, global_context=global_context,
        parallelism=settings.parallelism, fault_rate=settings.fault_rate,
        output_dir=output_dir,
    )


def write_regions(run_dir) -> Path:
    """Region annotations for the final keyframes, laid out the way the mock
    renderer places characters (one slot per expected character, sky strip
    for the background)."""
    run = open_run(run_dir)
    frames = []
    for job in run.state.ordered_jobs(run.sp.shot_ids):
        rel = job.keyframe_path
        if not rel:
            continue
        shot = run.sp.shot(job.shot_id)
        w, h = image_size(run.abs(rel))
        layout = mock_layout(w, h, len(shot.characters))
        regions = [{"kind": "background", "x": layout["background"][0],
                    "y": layout["background"][1], "w": layout["background"][2],
                    "h": layout["background"][3]}]
        for cid, (x, y, bw, bh) in zip(shot.characters, layout["slots"]):
            regions.append({"kind": "character", "character_id": cid, "x": x, "y": y,
                            "w": bw, "h": bh})
        frames.append({"frame": rel, "shot_id": job.shot_id, "regions": regions})
    path = Path(run_dir) / "regions.json"
    path.write_text(json.dumps({"frames": frames}, indent=2, sort_keys=True) + "\n")
    return path


def run_variant(out_dir, settings: DemoSettings, source: SourceSpec, label: str, *,
                max_retries: int, global_context: bool, stop_after: str | None = None):
    slug = {FULL: "full", NO_VERIFY: "no_verify", GLOBAL_CONTEXT: "global_context"}.get(
        label, label.replace(" ", "_"))
    run_dir = Path(out_dir) / slug
    cfg = demo_config(settings, max_retries=max_retries, global_context=global_context,
                      output_dir=str(run_dir))
    world = MockWorld(seed=settings.seed, fault_rate=settings.fault_rate)
    backends = build_backends(cfg.backends, world)
    run = run_remake(source, backends, cfg, run_dir, stop_after=stop_after)
    return run, backends


def evaluate_variant(run_dir, settings: DemoSettings) -> dict:
    world = MockWorld(seed=settings.seed, fault_rate=settings.fault_rate)
    backends = build_backends({}, world)
    regions = write_regions(run_dir)
    return evaluate_run(run_dir, backends.judge, backends.embed, regions)


def mock_demo(out_dir, settings: DemoSettings | None = None) -> DemoResult:
    settings = settings or DemoSettings()
    out_dir = Path(out_dir)
    source = prepare_inputs(out_dir, settings)
    result = DemoResult(out_dir)
    for label, flags in settings.variants().items():
        run, _ = run_variant(out_dir, settings, source, label, **flags)
        result.run_dirs[label] = run.dir
        result.rows[label] = evaluate_variant(run.dir, settings)

    rows = [{"label": label, **row["metrics"], "consistency": row["consistency"],
             "verified": row["verified"], "total": row["total"]}
            for label, row in result.rows.items()]
    warnings = sorted({w for row in result.rows.values() for w in row["warnings"]})
    report = EvalReport(
        remaking=rows,
        provenance={"settings": asdict(settings), "backends": "mock",
                    "variants": settings.variants()},
        warnings=warnings,
    )
    emit_report(report, out_dir)
    return result
