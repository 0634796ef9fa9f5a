"""Random obstacle scenes and solver-generated training datasets.

A dataset is a directory: one `meta.txt` (key=value) describing the whole
set, then one `run_NNNN/` per run holding `run.txt` (per-run scene spec),
`mask.lblt`, and `frame_NNNN.lblt` snapshots spaced `interval` solver steps
apart. Frame 0 is the state right after warmup. All randomness flows from
explicit 64-bit seeds through numpy's PCG64 generator so identical seeds
reproduce datasets bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DistributionError, FormatError, InstabilityError, PlacementError
from .lbm import (
    BoundaryMask,
    BoundaryMode,
    LatticeState,
    SolverConfig,
    step,
    uniform_state,
)
from .snapshot import load_mask, load_snapshot, save_mask, save_snapshot

log = logging.getLogger(__name__)

SHAPES = ("rectangle", "ellipse")


@dataclass
class ObjectSpec:
    shape: str  # "rectangle" | "ellipse"
    center: tuple[float, float]
    half_extent: tuple[float, float]


@dataclass
class SceneSpec:
    nx: int
    ny: int
    objects: list[ObjectSpec]
    seed: int


def random_scene(
    dims: tuple[int, int],
    object_count: int,
    size_range: tuple[float, float],
    seed: int,
) -> SceneSpec:
    """Place objects uniformly at random, never touching the x-end columns.

    `size_range` bounds the full extents (height and width); half-extents
    are half of that. Objects may overlap each other; the raster is their
    union. Placement keeps each bounding box inside x in [1, nx-2]. A
    placement that cannot fit after 1000 draws raises PlacementError.
    """
    nx, ny = dims
    lo, hi = size_range
    if lo > hi or lo <= 0:
        raise PlacementError(f"invalid size range [{lo}, {hi}]")
    if object_count > 0 and hi / 2.0 > (nx - 2) / 2.0:
        raise PlacementError(
            f"objects of extent {hi} cannot fit between the open columns of nx={nx}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    objects: list[ObjectSpec] = []
    for _ in range(object_count):
        for attempt in range(1000):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            a = rng.uniform(lo / 2.0, hi / 2.0)
            b = rng.uniform(lo / 2.0, hi / 2.0)
            cx = rng.uniform(0.0, nx - 1.0)
            cy = rng.uniform(0.0, ny - 1.0)
            if cx - a >= 1.0 and cx + a <= nx - 2.0:
                objects.append(ObjectSpec(shape, (cx, cy), (a, b)))
                break
        else:
            raise PlacementError(
                f"could not place object within x margins after 1000 attempts (nx={nx})"
            )
    return SceneSpec(nx=nx, ny=ny, objects=objects, seed=seed)


def rasterize(scene: SceneSpec) -> BoundaryMask:
    """Mark cells inside any object as solid.

    Rectangle: |x-cx| <= a and |y-cy| <= b. Ellipse: (dx/a)^2+(dy/b)^2 <= 1.
    Objects reaching past the y edges are clipped there.
    """
    xs = np.arange(scene.nx, dtype=np.float64)[:, None]
    ys = np.arange(scene.ny, dtype=np.float64)[None, :]
    solid = np.zeros((scene.nx, scene.ny), dtype=bool)
    for obj in scene.objects:
        (cx, cy), (a, b) = obj.center, obj.half_extent
        dx = np.abs(xs - cx)
        dy = np.abs(ys - cy)
        if obj.shape == "rectangle":
            inside = (dx <= a) & (dy <= b)
        elif obj.shape == "ellipse":
            inside = (dx / a) ** 2 + (dy / b) ** 2 <= 1.0
        else:
            raise PlacementError(f"unknown object shape {obj.shape!r}")
        solid |= inside
    mask = BoundaryMask(solid.astype(np.float64))
    mask.validate_open_x_ends()
    return mask


@dataclass
class DatasetRecord:
    """One solver run: scene, mask, and frames every `interval` steps."""

    scene: SceneSpec
    mask: BoundaryMask
    frames: list[np.ndarray]  # float32 (nx, ny, 9)
    interval: int
    warmup_steps: int
    tau: float
    inlet_velocity: float

    def frame_step_index(self, k: int) -> int:
        """Solver-step index at which frame k was recorded."""
        return self.warmup_steps + k * self.interval


def _run_one(
    scene: SceneSpec,
    cfg: SolverConfig,
    warmup_steps: int,
    frames_per_run: int,
    interval: int,
) -> DatasetRecord:
    """Simulate one scene, recording float32 frames. Raises InstabilityError."""
    mask = rasterize(scene)
    state = uniform_state(mask, rho=1.0, u=(cfg.inlet_velocity, 0.0))
    for _ in range(warmup_steps):
        state = step(state, mask, cfg)
    frames = [state.f.astype(np.float32)]
    for _ in range(frames_per_run - 1):
        for _ in range(interval):
            state = step(state, mask, cfg)
        frames.append(state.f.astype(np.float32))
    return DatasetRecord(
        scene=scene,
        mask=mask,
        frames=frames,
        interval=interval,
        warmup_steps=warmup_steps,
        tau=cfg.tau,
        inlet_velocity=cfg.inlet_velocity,
    )


def generate_dataset(
    n_runs: int,
    dims: tuple[int, int],
    cfg: SolverConfig,
    object_count: int = 2,
    size_range: tuple[float, float] = (6.0, 20.0),
    warmup_steps: int = 0,
    frames_per_run: int = 32,
    interval: int = 120,
    seed: int = 0,
    stats: dict | None = None,
) -> list[DatasetRecord]:
    """Generate n_runs independent records, retrying unstable runs.

    Each attempt draws a fresh scene seed from the master seed. Unstable
    runs are discarded and logged; once discards outnumber the requested
    runs (> 50% of attempts) the configuration is declared unusable. Pass
    a dict as `stats` to receive the discard count.
    """
    seed_rng = np.random.Generator(np.random.PCG64(seed))
    records: list[DatasetRecord] = []
    discarded = 0
    while len(records) < n_runs:
        scene_seed = int(seed_rng.integers(0, 2**63 - 1))
        scene = random_scene(dims, object_count, size_range, scene_seed)
        try:
            records.append(_run_one(scene, cfg, warmup_steps, frames_per_run, interval))
        except InstabilityError as exc:
            discarded += 1
            log.warning("discarding unstable run (seed %d): %s", scene_seed, exc)
            if discarded > n_runs:
                raise DistributionError(
                    f"{discarded} of {discarded + len(records)} attempted runs went "
                    "unstable; scene/solver configuration is unusable"
                ) from exc
    if discarded:
        log.info("regenerated %d unstable runs", discarded)
    if stats is not None:
        stats["discarded"] = discarded
    return records


# --- dataset directory I/O ---------------------------------------------------


def _write_kv(path: Path, pairs: list[tuple[str, object]]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in pairs))


def _read_kv(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path.name}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _scene_lines(scene: SceneSpec) -> list[tuple[str, object]]:
    pairs: list[tuple[str, object]] = [
        ("scene_seed", scene.seed),
        ("objects", len(scene.objects)),
    ]
    for i, obj in enumerate(scene.objects):
        pairs.append(
            (
                f"object{i}",
                f"{obj.shape};cx={obj.center[0]!r};cy={obj.center[1]!r};"
                f"a={obj.half_extent[0]!r};b={obj.half_extent[1]!r}",
            )
        )
    return pairs


def _parse_scene(kv: dict[str, str], nx: int, ny: int) -> SceneSpec:
    try:
        count = int(kv["objects"])
        objects = []
        for i in range(count):
            shape, *fields = kv[f"object{i}"].split(";")
            vals = dict(f.split("=", 1) for f in fields)
            objects.append(
                ObjectSpec(
                    shape=shape,
                    center=(float(vals["cx"]), float(vals["cy"])),
                    half_extent=(float(vals["a"]), float(vals["b"])),
                )
            )
        return SceneSpec(nx=nx, ny=ny, objects=objects, seed=int(kv["scene_seed"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed scene description: {exc}") from exc


def save_dataset(records: list[DatasetRecord], path: str | Path, seed: int = 0) -> None:
    """Write records to a dataset directory (see module docstring)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    first = records[0] if records else None
    _write_kv(
        root / "meta.txt",
        [
            ("format_version", 1),
            ("runs", len(records)),
            ("nx", first.scene.nx if first else 0),
            ("ny", first.scene.ny if first else 0),
            ("seed", seed),
            ("tau", repr(first.tau) if first else "0.0"),
            ("inlet_velocity", repr(first.inlet_velocity) if first else "0.0"),
            ("interval", first.interval if first else 0),
            ("warmup", first.warmup_steps if first else 0),
            ("frames", len(first.frames) if first else 0),
        ],
    )
    for r, record in enumerate(records):
        run_dir = root / f"run_{r:04d}"
        run_dir.mkdir(exist_ok=True)
        _write_kv(run_dir / "run.txt", _scene_lines(record.scene))
        save_mask(run_dir / "mask.lblt", record.mask)
        for k, frame in enumerate(record.frames):
            save_snapshot(run_dir / f"frame_{k:04d}.lblt", frame)


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    """Load a dataset directory written by save_dataset."""
    root = Path(path)
    meta_path = root / "meta.txt"
    if not meta_path.exists():
        raise FormatError(f"{root} is not a dataset directory (missing meta.txt)")
    meta = _read_kv(meta_path)
    version = int(meta.get("format_version", "0"))
    if version != 1:
        from .errors import VersionError

        raise VersionError(found=version, expected=1)
    runs = int(meta["runs"])
    nx, ny = int(meta["nx"]), int(meta["ny"])
    records = []
    for r in range(runs):
        run_dir = root / f"run_{r:04d}"
        kv = _read_kv(run_dir / "run.txt")
        scene = _parse_scene(kv, nx, ny)
        mask = load_mask(run_dir / "mask.lblt")
        frames = [
            load_snapshot(run_dir / f"frame_{k:04d}.lblt")
            for k in range(int(meta["frames"]))
        ]
        records.append(
            DatasetRecord(
                scene=scene,
                mask=mask,
                frames=frames,
                interval=int(meta["interval"]),
                warmup_steps=int(meta["warmup"]),
                tau=float(meta["tau"]),
                inlet_velocity=float(meta["inlet_velocity"]),
            )
        )
    return records
