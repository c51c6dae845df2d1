'''
cli_io.py - run configuration and file formats
==============================================

Configuration
-------------

:class:`RunConfig` collects every constant of a run in nested frozen
dataclasses.  It is read from a YAML file with one section per
component, the same layout the workflow ``pipeline.yml`` files use::

    seed: 1
    field:
        r: 0.75
        d: 256
    maps:
        k_coarse: 5

Missing keys keep their defaults, unknown keys are an error.

Randomness comes from :func:`task_rng`: a generator derived from the
run seed and a task key, so results do not depend on the order in
which tasks run.

File formats
------------

scene (``.json``)
    ``{"corners": [[x, y, z], ...], "objects": [{"id", "label",
    "points"}]}`` with sorted keys and shortest round-trip floats.
array bundle (``.bundle``)
    a magic line, one line of JSON header (metadata plus name, dtype
    and shape of every array) and the little-endian array payload.
    Checkpoints and triplets are bundles.
evaluation pair, scene map, trajectory (``.json``)
    structured text like scenes.
metric report, heatmap, manifest (``.tsv``)
    tab separated tables.
'''

import collections
import dataclasses
import hashlib
import json
import os

import numpy as np
import pandas
import torch
import yaml

from cgatcore import iotools
import cgatcore.experiment as E

from scenemap.descriptor_field import FieldConfig, init_field
from scenemap.errors import ValidationError
from scenemap.evaluation import EvalConfig, EvalPair, EvalPairSettings
from scenemap.map_estimation import (AffineMap, DisplacementMap, MapConfig,
                                     SceneMap, Unmappable)
from scenemap.numeric_core import DTYPE, AdamState
from scenemap.scene_generator import GeneratorSettings
from scenemap.scene_model import ObjectInstance, RegionOfInterest, Scene
from scenemap.training import TrainConfig, TrainingRun, TripletRecord
from scenemap.transfer import Trajectory


BUNDLE_MAGIC = b"SCENEMAP-BUNDLE 1\n"
THREADS_VARIABLE = "SCENEMAP_THREADS"
ABLATIONS = ("semantic", "distance", "displacement")


@dataclasses.dataclass(frozen=True)
class TransferConfig:
    n_rand: int = 256
    iterations: int = 10
    cell_size: float = 0.1
    samples_per_segment: int = 10

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValidationError(
                    "transfer.{} must be positive".format(f.name))


@dataclasses.dataclass(frozen=True)
class GenerationConfig:
    scenes: int = 20
    triplets: int = 100
    eval_pairs: int = 20
    unmatchable_pairs: int = 5
    rooms: GeneratorSettings = GeneratorSettings()
    pairs: EvalPairSettings = EvalPairSettings()

    def __post_init__(self):
        if self.scenes <= 0:
            raise ValidationError("generation.scenes must be positive")
        for name in ("triplets", "eval_pairs", "unmatchable_pairs"):
            if getattr(self, name) < 0:
                raise ValidationError(
                    "generation.{} must not be negative".format(name))


@dataclasses.dataclass(frozen=True)
class RunConfig:
    '''every constant of a run.'''

    seed: int = 0
    threads: int = 1
    field: FieldConfig = FieldConfig()
    train: TrainConfig = TrainConfig()
    maps: MapConfig = MapConfig()
    eval: EvalConfig = EvalConfig()
    transfer: TransferConfig = TransferConfig()
    generation: GenerationConfig = GenerationConfig()

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.threads <= 0:
            raise ValidationError("threads must be positive")

    def with_ablations(self, ablations):
        '''switch off the named components.'''
        cfg = self
        for name in ablations:
            if name == "semantic":
                cfg = dataclasses.replace(cfg, field=dataclasses.replace(
                    cfg.field, use_semantic=False))
            elif name == "distance":
                cfg = dataclasses.replace(cfg, field=dataclasses.replace(
                    cfg.field, use_distance=False))
            elif name == "displacement":
                cfg = dataclasses.replace(cfg, maps=dataclasses.replace(
                    cfg.maps, use_displacement=False))
            else:
                raise ValidationError("unknown ablation {}".format(name))
        return cfg


# dotted config path -> published default
PUBLISHED_DEFAULTS = {
    "field.r": 0.75,
    "field.d": 256,
    "field.emb_dim": 32,
    "field.layers": 6,
    "field.heads": 8,
    "field.keypoints_per_object": 50,
    "train.tau": 0.2,
    "train.lr": 1e-4,
    "train.batch_size": 4,
    "train.query_grid": 20,
    "maps.tps_lambda": 0.5,
    "maps.n_ortho": 16,
    "maps.k_coarse": 5,
    "maps.rho_valid": 1.5,
    "maps.lr": 1e-3,
    "maps.outlier_threshold": 2.0,
    "eval.pcp_thresholds": (0.25, 0.5),
    "eval.chamfer_thresholds": (0.15, 0.2),
    "generation.pairs.roi_points": 400,
    "generation.pairs.p_remove": 0.5,
}


def lookup(cfg, dotted):
    value = cfg
    for part in dotted.split("."):
        value = getattr(value, part)
    return value


def check_defaults(cfg=None):
    '''(path, expected, actual) for every default that differs.'''
    cfg = RunConfig() if cfg is None else cfg
    return [(path, expected, lookup(cfg, path))
            for path, expected in PUBLISHED_DEFAULTS.items()
            if lookup(cfg, path) != expected]


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValidationError("section {} must be a mapping".format(where))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValidationError(
            "unknown keys in {}: {}".format(where or "config", unknown))
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, where + name + ".")
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def config_from_dict(data):
    return _build(RunConfig, data or {}, "")


def load_config(path=None):
    '''RunConfig from a YAML file; defaults without a file.'''
    if path is None:
        return RunConfig()
    with iotools.open_file(path) as inf:
        data = yaml.safe_load(inf)
    E.debug("read configuration from {}".format(path))
    return config_from_dict(data)


def config_to_dict(cfg):
    def plain(value):
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value
    return plain(dataclasses.asdict(cfg))


def dump_config(cfg, path):
    with iotools.open_file(path, "w") as outf:
        yaml.safe_dump(config_to_dict(cfg), outf, sort_keys=True)


def _key_int(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def task_rng(seed, *key):
    '''random generator for the task named by *key* under run *seed*.'''
    seq = np.random.SeedSequence(int(seed),
                                 spawn_key=tuple(_key_int(k) for k in key))
    return np.random.default_rng(seq)


def configure_threads(threads):
    '''set the torch thread count; SCENEMAP_THREADS takes precedence.'''
    env = os.environ.get(THREADS_VARIABLE)
    if env:
        try:
            threads = int(env)
        except ValueError as exc:
            raise ValidationError(
                "{} must be an integer, got {}".format(
                    THREADS_VARIABLE, env)) from exc
    if threads <= 0:
        raise ValidationError("thread count must be positive")
    torch.set_num_threads(threads)
    return threads


# ------------------------------------------------------------------
# structured text
# ------------------------------------------------------------------
def _dumps(data):
    return json.dumps(data, sort_keys=True, allow_nan=False) + "\n"


def _write_text(path, text):
    with iotools.open_file(path, "w") as outf:
        outf.write(text)


def _read_json(path):
    try:
        with iotools.open_file(path) as inf:
            return json.load(inf)
    except (OSError, ValueError) as exc:
        raise ValidationError("cannot read {}: {}".format(path, exc)) from exc


def scene_to_dict(scene):
    return {"corners": scene.corners.tolist(),
            "objects": [{"id": o.id, "label": o.label,
                         "points": o.points.tolist()}
                        for o in scene.objects]}


def scene_from_dict(data):
    try:
        objects = tuple(ObjectInstance(o["id"], o["label"], o["points"])
                        for o in data["objects"])
        return Scene(objects, data["corners"])
    except (KeyError, TypeError) as exc:
        raise ValidationError("malformed scene: {}".format(exc)) from exc


def write_scene(scene, path):
    _write_text(path, _dumps(scene_to_dict(scene)))


def read_scene(path, num_classes=None):
    '''scene file checked for labels in [1, *num_classes*] and for
    containment in its corner hull.'''
    scene = scene_from_dict(_read_json(path))
    try:
        return scene.validate(num_classes)
    except ValidationError as exc:
        raise ValidationError("{}: {}".format(path, exc)) from exc


def roi_to_dict(roi):
    return {"object_ids": list(roi.object_ids),
            "points": roi.points.tolist(),
            "point_object_ids": roi.point_object_ids.tolist()}


def roi_from_dict(data):
    try:
        return RegionOfInterest(tuple(data["object_ids"]), data["points"],
                                data["point_object_ids"])
    except (KeyError, TypeError) as exc:
        raise ValidationError("malformed region: {}".format(exc)) from exc


def write_eval_pair(pair, path):
    _write_text(path, _dumps({
        "name": pair.name,
        "matchable": pair.matchable,
        "target": scene_to_dict(pair.target),
        "reference": scene_to_dict(pair.reference),
        "roi": roi_to_dict(pair.roi),
        "gt_points": None if pair.gt_points is None else pair.gt_points.tolist()}))


def read_eval_pair(path, num_classes=None):
    data = _read_json(path)
    try:
        target = scene_from_dict(data["target"]).validate(num_classes)
        reference = scene_from_dict(data["reference"]).validate(num_classes)
        return EvalPair(target, reference,
                        roi_from_dict(data["roi"]),
                        data["gt_points"], bool(data["matchable"]),
                        data.get("name", ""))
    except KeyError as exc:
        raise ValidationError("malformed pair {}: {}".format(path, exc)) from exc


def _finite_or_none(value):
    return None if value is None or not np.isfinite(value) else float(value)


def map_to_dict(result, constants=None, warped=None):
    if isinstance(result, Unmappable):
        data = {"status": "unmappable", "cost": _finite_or_none(result.cost),
                "reason": result.reason}
    else:
        data = {"status": "mapped",
                "affine": {"A": result.affine.A.tolist(),
                           "b": result.affine.b.tolist()},
                "displacement": {
                    "control_points": result.displacement.control_points.tolist(),
                    "weights": result.displacement.weights.tolist()},
                "cost": float(result.cost),
                "coarse_cost": _finite_or_none(result.coarse_cost),
                "affine_cost": _finite_or_none(result.affine_cost),
                "inlier_object_ids": list(result.inlier_object_ids)}
        if warped is not None:
            data["warped_points"] = np.asarray(warped).tolist()
    if constants is not None:
        data["constants"] = constants
    return data


def map_from_dict(data):
    try:
        if data["status"] == "unmappable":
            cost = data.get("cost")
            return Unmappable(float("inf") if cost is None else cost,
                              data.get("reason", ""))
        if data["status"] != "mapped":
            raise ValidationError("unknown map status {}".format(data["status"]))
        return SceneMap(AffineMap(data["affine"]["A"], data["affine"]["b"]),
                        DisplacementMap(data["displacement"]["control_points"],
                                        data["displacement"]["weights"]),
                        data["cost"], data["inlier_object_ids"],
                        data.get("coarse_cost"), data.get("affine_cost"))
    except (KeyError, TypeError) as exc:
        raise ValidationError("malformed map: {}".format(exc)) from exc


def write_map(result, path, constants=None, warped=None, roi=None):
    data = map_to_dict(result, constants, warped)
    if roi is not None:
        data["roi"] = roi_to_dict(roi)
    _write_text(path, _dumps(data))


def read_map(path):
    return map_from_dict(_read_json(path))


def read_map_region(path):
    '''the region a map or candidates file was estimated on, or None.'''
    data = _read_json(path)
    return roi_from_dict(data["roi"]) if "roi" in data else None


def write_trajectory(trajectory, path, status=None):
    data = {"timestamps": trajectory.timestamps.tolist(),
            "boxes": trajectory.boxes.tolist()}
    if status is not None:
        data["status"] = list(status)
    _write_text(path, _dumps(data))


def read_trajectory(path):
    '''the trajectory and its per-segment planner status (or None).'''
    data = _read_json(path)
    try:
        return (Trajectory(data["timestamps"], data["boxes"]),
                data.get("status"))
    except KeyError as exc:
        raise ValidationError("malformed trajectory: {}".format(exc)) from exc


def write_objects(objects, path):
    _write_text(path, _dumps({"objects": [
        {"id": o.id, "label": o.label, "points": o.points.tolist()}
        for o in objects]}))


def read_objects(path):
    data = _read_json(path)
    try:
        return [ObjectInstance(o["id"], o["label"], o["points"])
                for o in data["objects"]]
    except (KeyError, TypeError) as exc:
        raise ValidationError("malformed objects: {}".format(exc)) from exc


# ------------------------------------------------------------------
# array bundles
# ------------------------------------------------------------------
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def write_bundle(path, arrays, meta=None):
    '''write named float64/int64 arrays plus JSON metadata.'''
    entries, payload = [], []
    for name, value in arrays.items():
        value = np.asarray(value)
        code = "i8" if np.issubdtype(value.dtype, np.integer) else "f8"
        value = np.ascontiguousarray(value, dtype=_DTYPES[code])
        entries.append({"name": name, "dtype": code, "shape": list(value.shape)})
        payload.append(value.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta or {}},
                        sort_keys=True, allow_nan=False)
    with iotools.open_file(path, "wb", encoding=None) as outf:
        outf.write(BUNDLE_MAGIC)
        outf.write(header.encode("utf-8") + b"\n")
        for chunk in payload:
            outf.write(chunk)


def read_bundle(path):
    '''(ordered name -> array, metadata) of a bundle file.'''
    with iotools.open_file(path, "rb", encoding=None) as inf:
        data = inf.read()
    if not data.startswith(BUNDLE_MAGIC):
        raise ValidationError("{} is not an array bundle".format(path))
    end = data.index(b"\n", len(BUNDLE_MAGIC))
    header = json.loads(data[len(BUNDLE_MAGIC):end].decode("utf-8"))
    offset = end + 1
    arrays = collections.OrderedDict()
    for entry in header["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        size = count * dtype.itemsize
        if offset + size > len(data):
            raise ValidationError("{} is truncated".format(path))
        arrays[entry["name"]] = np.frombuffer(
            data, dtype=dtype, count=count, offset=offset).reshape(
                entry["shape"]).copy()
        offset += size
    if offset != len(data):
        raise ValidationError("{} has trailing bytes".format(path))
    return arrays, header["meta"]


def save_checkpoint(path, run, field_cfg, train_cfg, seed):
    '''field weights, Adam moments, step and training log.'''
    arrays = collections.OrderedDict()
    for name, value in run.field.params().items():
        arrays["param/" + name] = value.numpy()
    for i, (m, v) in enumerate(zip(run.adam.first_moment,
                                   run.adam.second_moment)):
        arrays["adam/m/{:04d}".format(i)] = m.detach().numpy()
        arrays["adam/v/{:04d}".format(i)] = v.detach().numpy()
    table = run.log_table()
    arrays["log/step"] = table["step"].to_numpy(dtype=np.int64)
    arrays["log/loss"] = table["loss"].to_numpy(dtype=np.float64)
    arrays["log/best_loss"] = table["best_loss"].to_numpy(dtype=np.float64)
    meta = {"field": config_to_dict(field_cfg),
            "train": config_to_dict(train_cfg),
            "step": run.step,
            "adam_step": run.adam.step,
            "seed": int(seed)}
    write_bundle(path, arrays, meta)


def load_checkpoint(path, field_cfg=None, train_cfg=None):
    '''(TrainingRun, FieldConfig, metadata) from a checkpoint.

    A given *field_cfg* must match the stored architecture.
    '''
    arrays, meta = read_bundle(path)
    try:
        stored = _build(FieldConfig, meta["field"], "field.")
    except KeyError as exc:
        raise ValidationError("checkpoint {} has no field config".format(
            path)) from exc
    if field_cfg is not None and field_cfg != stored:
        diff = sorted(k for k, v in dataclasses.asdict(stored).items()
                      if dataclasses.asdict(field_cfg)[k] != v)
        raise ValidationError(
            "checkpoint {} does not match the configured field: {}".format(
                path, diff))
    train_cfg = train_cfg or _build(TrainConfig, meta.get("train"), "train.")

    field = init_field(stored)
    params = collections.OrderedDict(
        (name[len("param/"):], torch.as_tensor(value, dtype=DTYPE))
        for name, value in arrays.items() if name.startswith("param/"))
    field.load_params(params)

    params_list = list(field.parameters())
    adam = AdamState(params_list, lr=train_cfg.lr)
    if meta.get("adam_step", 0):
        for i, p in enumerate(params_list):
            adam.optimizer.state[p] = {
                "step": torch.tensor(float(meta["adam_step"]), dtype=DTYPE),
                "exp_avg": torch.as_tensor(arrays["adam/m/{:04d}".format(i)],
                                           dtype=DTYPE).clone(),
                "exp_avg_sq": torch.as_tensor(
                    arrays["adam/v/{:04d}".format(i)], dtype=DTYPE).clone()}
    log = [{"step": int(s), "loss": float(v), "best_loss": float(b)}
           for s, v, b in zip(arrays.get("log/step", []),
                              arrays.get("log/loss", []),
                              arrays.get("log/best_loss", []))]
    field.eval()
    return TrainingRun(field, adam, int(meta.get("step", 0)), log), stored, meta


def write_triplet(triplet, path):
    write_bundle(path,
                 collections.OrderedDict([("queries", triplet.queries),
                                          ("positives", triplet.positives),
                                          ("slots", triplet.slots)]),
                 {"source": scene_to_dict(triplet.source),
                  "positive": scene_to_dict(triplet.positive),
                  "negative": scene_to_dict(triplet.negative)})


def read_triplet(path):
    arrays, meta = read_bundle(path)
    try:
        return TripletRecord(scene_from_dict(meta["source"]),
                             scene_from_dict(meta["positive"]),
                             scene_from_dict(meta["negative"]),
                             arrays["queries"], arrays["positives"],
                             arrays["slots"])
    except KeyError as exc:
        raise ValidationError("malformed triplet {}: {}".format(
            path, exc)) from exc


# ------------------------------------------------------------------
# tables
# ------------------------------------------------------------------
def write_table(table, path):
    table.to_csv(path, sep="\t", index=False)


def read_table(path, columns=None):
    try:
        table = pandas.read_csv(path, sep="\t")
    except (OSError, ValueError) as exc:
        raise ValidationError("cannot read {}: {}".format(path, exc)) from exc
    if columns is not None:
        missing = [c for c in columns if c not in table.columns]
        if missing:
            raise ValidationError(
                "{} lacks columns {}".format(path, missing))
    return table


def file_digest(path):
    digest = hashlib.sha256()
    with iotools.open_file(path, "rb", encoding=None) as inf:
        for block in iter(lambda: inf.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir, paths, manifest="manifest.tsv"):
    '''tab separated relative path and sha256 of every artifact.'''
    rows = sorted((os.path.relpath(p, out_dir), file_digest(p)) for p in paths)
    table = pandas.DataFrame(rows, columns=["path", "sha256"])
    target = os.path.join(out_dir, manifest)
    write_table(table, target)
    return target


def write_candidates(maps, path, constants=None, roi=None):
    '''a ranked list of candidate maps of one region.'''
    data = {"maps": [map_to_dict(m) for m in maps]}
    if constants is not None:
        data["constants"] = constants
    if roi is not None:
        data["roi"] = roi_to_dict(roi)
    _write_text(path, _dumps(data))


def read_candidates(path):
    '''candidate maps of a candidates file, or the single map of a map
    file.'''
    data = _read_json(path)
    if "maps" in data:
        return [map_from_dict(m) for m in data["maps"]]
    return [map_from_dict(data)]
