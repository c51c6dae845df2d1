'''
scene_analogy.py - command line for scene analogies
===================================================

Commands
--------

gen-data
    generate toy rooms, training triplets and evaluation pairs
train
    train (or resume training of) a descriptor field
estimate
    estimate the map of a region from a target to a reference scene
eval
    score estimated maps on evaluation pairs
transfer
    move trajectories or objects through estimated maps
heatmap
    descriptor distance of one query over the reference scene
check-config
    compare the configuration against the published constants

Every command takes ``--seed``, ``--config``, ``--threads`` and
``--ablate`` before the command name.  Exit code 0 means success, 1 a
validation error and 2 a numeric failure.
'''

import glob
import logging
import os
import sys

import click
import numpy as np

from scenemap import cli_io
from scenemap.descriptor_field import field_distance_grid, init_field
from scenemap.errors import NumericError, ValidationError
from scenemap.evaluation import (EvalPair, MetricReport, evaluate_pair,
                                 generate_eval_pair,
                                 generate_unmatchable_pair, ground_truth_map)
from scenemap.map_estimation import (Unmappable, check_map_cost,
                                     estimate_inverse, estimate_map,
                                     top_k_maps)
from scenemap.scene_generator import generate_dataset
from scenemap.scene_model import build_occupancy_grid, sample_roi
from scenemap.training import (build_object_pool, descriptor_discrimination,
                               generate_triplet, start_run, train_field)
from scenemap.transfer import (long_trajectory_transfer, multi_roi_align,
                               object_placement_transfer,
                               sample_isometry_points,
                               short_trajectory_transfer)


# ########################################################################### #
# ###################### Set up the logging ################################# #
# ########################################################################### #

logging.basicConfig(stream=sys.stdout, level=logging.INFO)
L = logging.getLogger("scene_analogy.py")


def _ids(text):
    if text is None:
        return None
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ValidationError(
            "object ids must be comma separated integers, got {}".format(
                text)) from exc


def _sorted_files(directory, pattern):
    return sorted(glob.glob(os.path.join(directory, pattern)))


def _load_field(cfg, checkpoint):
    run, _, _ = cli_io.load_checkpoint(checkpoint, cfg.field, cfg.train)
    L.info("loaded field from {} after {} steps".format(checkpoint, run.step))
    return run.field


@click.group()
@click.option("--seed", type=int, default=None, help="run seed")
@click.option("--config", "config_path", default=None,
              help="YAML configuration file")
@click.option("--threads", type=int, default=None,
              help="torch threads (SCENEMAP_THREADS overrides)")
@click.option("--ablate", multiple=True,
              type=click.Choice(cli_io.ABLATIONS),
              help="switch off a component, may be repeated")
@click.pass_context
def cli(ctx, seed, config_path, threads, ablate):
    cfg = cli_io.load_config(config_path)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if threads is not None:
        overrides["threads"] = threads
    if overrides:
        cfg = cli_io.config_from_dict(
            dict(cli_io.config_to_dict(cfg), **overrides))
    cfg = cfg.with_ablations(ablate)
    cli_io.configure_threads(cfg.threads)
    L.info("args: seed={} config={} threads={} ablate={}".format(
        cfg.seed, config_path, cfg.threads, list(ablate)))
    ctx.obj = cfg


@cli.command("gen-data")
@click.option("-o", "--out-dir", required=True,
              help="output directory of the dataset")
@click.pass_obj
def gen_data(cfg, out_dir):
    '''toy rooms, training triplets and evaluation pairs.'''
    gen = cfg.generation
    for sub in ("scenes", "triplets", "pairs"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    scenes = generate_dataset(gen.scenes, cfg.seed, gen.rooms)
    written = []
    for i, scene in enumerate(scenes):
        path = os.path.join(out_dir, "scenes", "scene_{:04d}.json".format(i))
        cli_io.write_scene(scene, path)
        written.append(path)

    pool = build_object_pool(scenes)
    for i in range(gen.triplets):
        rng = cli_io.task_rng(cfg.seed, "triplet", i)
        triplet = generate_triplet(scenes[rng.integers(len(scenes))], pool,
                                   rng, cfg.train)
        path = os.path.join(out_dir, "triplets",
                            "triplet_{:04d}.bundle".format(i))
        cli_io.write_triplet(triplet, path)
        written.append(path)
    L.info("wrote {} scenes and {} triplets".format(len(scenes),
                                                    gen.triplets))

    for kind, count, make in (("pair", gen.eval_pairs, generate_eval_pair),
                              ("unmatchable", gen.unmatchable_pairs,
                               generate_unmatchable_pair)):
        for i in range(count):
            rng = cli_io.task_rng(cfg.seed, kind, i)
            target = int(rng.integers(len(scenes)))
            dataset = [s for j, s in enumerate(scenes) if j != target] or scenes
            pair = make(scenes[target], dataset, rng, gen.pairs)
            name = "{}_{:04d}".format(kind, i)
            pair = EvalPair(pair.target, pair.reference, pair.roi,
                            pair.gt_points, pair.matchable, name)
            path = os.path.join(out_dir, "pairs", name + ".json")
            cli_io.write_eval_pair(pair, path)
            written.append(path)
    L.info("wrote {} matchable and {} unmatchable pairs".format(
        gen.eval_pairs, gen.unmatchable_pairs))

    manifest = cli_io.write_manifest(out_dir, written)
    L.info("manifest written to {}".format(manifest))


@cli.command()
@click.option("-d", "--dataset-dir", required=True,
              help="directory written by gen-data")
@click.option("-o", "--out", required=True, help="output checkpoint")
@click.option("--steps", type=int, default=None,
              help="number of steps, default train.steps")
@click.option("--resume", default=None, help="checkpoint to continue from")
@click.option("--log", "log_path", default=None,
              help="training log table (step, loss, best_loss)")
@click.pass_obj
def train(cfg, dataset_dir, out, steps, resume, log_path):
    '''train a descriptor field on the rooms of a dataset.'''
    scenes = [cli_io.read_scene(p, cfg.field.num_classes) for p in
              _sorted_files(os.path.join(dataset_dir, "scenes"), "*.json")]
    if not scenes:
        raise ValidationError("no scenes in {}".format(dataset_dir))
    if resume is not None:
        run, _, _ = cli_io.load_checkpoint(resume, cfg.field, cfg.train)
        L.info("resuming from step {}".format(run.step))
    else:
        run = start_run(init_field(cfg.field, cfg.seed), cfg.train)
    run = train_field(scenes, run.field, cfg.train, cfg.seed, steps, run)
    cli_io.save_checkpoint(out, run, cfg.field, cfg.train, cfg.seed)
    if log_path is not None:
        cli_io.write_table(run.log_table(), log_path)

    triplets = [cli_io.read_triplet(p) for p in
                _sorted_files(os.path.join(dataset_dir, "triplets"),
                              "*.bundle")]
    if triplets:
        score = descriptor_discrimination(
            run.field, triplets, max_pairs=cfg.train.batch_size * 16,
            rng=cli_io.task_rng(cfg.seed, "discrimination"))
        L.info("held-out discrimination {:.4f} on {} triplets".format(
            score, len(triplets)))
    L.info("checkpoint written to {}".format(out))


@cli.command()
@click.option("-c", "--checkpoint", required=True, help="trained field")
@click.option("--pair", "pair_path", default=None,
              help="evaluation pair supplying scenes and region")
@click.option("-t", "--target", default=None, help="target scene")
@click.option("-r", "--reference", default=None, help="reference scene")
@click.option("--roi", default=None,
              help="comma separated target object ids, default all")
@click.option("--top-k", type=int, default=None,
              help="write the k best valid maps as candidates")
@click.option("-o", "--out", required=True, help="output map file")
@click.pass_obj
def estimate(cfg, checkpoint, pair_path, target, reference, roi, top_k, out):
    '''map a region of the target scene into the reference scene.'''
    if pair_path is not None:
        pair = cli_io.read_eval_pair(pair_path, cfg.field.num_classes)
        scene_tgt, scene_ref, region = pair.target, pair.reference, pair.roi
    else:
        if target is None or reference is None:
            raise ValidationError("estimate needs --pair or both --target "
                                  "and --reference")
        scene_tgt = cli_io.read_scene(target, cfg.field.num_classes)
        scene_ref = cli_io.read_scene(reference, cfg.field.num_classes)
        ids = _ids(roi) or scene_tgt.object_ids
        region = sample_roi(scene_tgt, ids, cfg.generation.pairs.roi_points)

    field = _load_field(cfg, checkpoint)
    constants = cli_io.config_to_dict(cfg.maps)
    if top_k is not None:
        maps = top_k_maps(scene_tgt, scene_ref, region, field, cfg.maps,
                          top_k)
        L.info("{} valid candidate maps".format(len(maps)))
        cli_io.write_candidates(maps, out, constants, region)
        return

    result = estimate_map(scene_tgt, scene_ref, region, field, cfg.maps)
    if isinstance(result, Unmappable):
        L.info("region is unmappable: {}".format(result.reason))
        cli_io.write_map(result, out, constants, roi=region)
    else:
        L.info("map cost {:.6f}".format(result.cost))
        cli_io.write_map(result, out, constants, result.apply(region.points),
                         region)


@cli.command("eval")
@click.option("-c", "--checkpoint", default=None, help="trained field")
@click.option("-p", "--pairs-dir", required=True,
              help="directory of evaluation pairs")
@click.option("-o", "--out", required=True, help="output metric report")
@click.option("--maps-dir", default=None,
              help="also write the estimated maps here")
@click.option("--mapper", type=click.Choice(["field", "ground-truth"]),
              default="field",
              help="estimate maps with the field or use the pseudo ground "
              "truth")
@click.pass_obj
def evaluate(cfg, checkpoint, pairs_dir, out, maps_dir, mapper):
    '''PCP, bijectivity PCP and Chamfer accuracy over evaluation pairs.'''
    paths = _sorted_files(pairs_dir, "*.json")
    if not paths:
        raise ValidationError("no evaluation pairs in {}".format(pairs_dir))
    if mapper == "field":
        if checkpoint is None:
            raise ValidationError("--checkpoint is required with the field "
                                  "mapper")
        field = _load_field(cfg, checkpoint)
    if maps_dir is not None:
        os.makedirs(maps_dir, exist_ok=True)

    rows = []
    for path in paths:
        pair = cli_io.read_eval_pair(path, cfg.field.num_classes)
        if not pair.name:
            pair = EvalPair(
                pair.target, pair.reference, pair.roi, pair.gt_points,
                pair.matchable,
                os.path.splitext(os.path.basename(path))[0])
        if mapper == "ground-truth":
            forward = ground_truth_map(pair) if pair.matchable else None
            inverse = None
        else:
            forward = estimate_map(pair.target, pair.reference, pair.roi,
                                   field, cfg.maps)
            inverse = None
            if pair.matchable and not isinstance(forward, Unmappable):
                inverse = estimate_inverse(pair.reference, pair.target,
                                           forward, pair.roi, field, cfg.maps)
        row = evaluate_pair(pair, forward, inverse, cfg.eval)
        L.info("{}: {}".format(pair.name, ", ".join(
            "{}={:.3f}".format(k, v) for k, v in sorted(row.items())
            if k not in ("pair",))))
        rows.append(row)
        if maps_dir is not None and forward is not None:
            cli_io.write_map(forward,
                             os.path.join(maps_dir, pair.name + ".json"))

    report = MetricReport.from_rows(rows, cfg.eval)
    cli_io.write_table(report.table(cfg.eval), out)
    L.info("report written to {}".format(out))


def _regions(scene_tgt, maps, points_per_object):
    regions = []
    for m in maps:
        if not m.inlier_object_ids:
            raise ValidationError("map has no inlier objects to define its "
                                  "region")
        regions.append(sample_roi(scene_tgt, m.inlier_object_ids,
                                  points_per_object))
    return regions


def _check_costs(cfg, checkpoint, map_paths, candidates, target, reference):
    if target is None or reference is None:
        raise ValidationError("re-checking map costs needs the target and "
                              "reference scenes")
    field = _load_field(cfg, checkpoint)
    scene_tgt = cli_io.read_scene(target, cfg.field.num_classes)
    scene_ref = cli_io.read_scene(reference, cfg.field.num_classes)
    for path, cands in zip(map_paths, candidates):
        region = cli_io.read_map_region(path)
        if region is None:
            raise ValidationError("{} does not record its region".format(path))
        for scene_map in cands:
            check_map_cost(scene_map, region, field, scene_tgt, scene_ref)
    L.info("recorded costs of {} maps confirmed".format(
        sum(len(c) for c in candidates)))


@cli.command()
@click.option("--mode", required=True,
              type=click.Choice(["short-traj", "long-traj", "placement"]),
              help="what to transfer")
@click.option("-m", "--map", "map_paths", multiple=True, required=True,
              help="map or candidates file, one per region")
@click.option("-i", "--input", "input_path", required=True,
              help="trajectory, waypoints or objects file")
@click.option("-t", "--target", default=None,
              help="target scene (several long-traj regions, cost "
              "re-check)")
@click.option("-r", "--reference", default=None,
              help="reference scene (long-traj occupancy grid, cost "
              "re-check)")
@click.option("-c", "--checkpoint", default=None,
              help="trained field; re-check the recorded map costs "
              "against the target and reference scenes")
@click.option("-o", "--out", required=True, help="output file")
@click.pass_obj
def transfer(cfg, mode, map_paths, input_path, target, reference,
             checkpoint, out):
    '''move a trajectory or objects from the target to the reference
    scene.'''
    candidates = [[m for m in cli_io.read_candidates(p)
                   if not isinstance(m, Unmappable)] for p in map_paths]
    for path, cands in zip(map_paths, candidates):
        if not cands:
            raise ValidationError("{} holds no usable map".format(path))
    if checkpoint is not None:
        _check_costs(cfg, checkpoint, map_paths, candidates, target,
                     reference)

    if mode in ("short-traj", "placement"):
        if len(map_paths) != 1:
            raise ValidationError("{} uses exactly one map".format(mode))
        scene_map = candidates[0][0]
        if mode == "short-traj":
            trajectory, _ = cli_io.read_trajectory(input_path)
            cli_io.write_trajectory(
                short_trajectory_transfer(scene_map, trajectory), out)
        else:
            items = cli_io.read_objects(input_path)
            cli_io.write_objects(object_placement_transfer(scene_map, items),
                                 out)
        L.info("{} written to {}".format(mode, out))
        return

    if reference is None:
        raise ValidationError("long-traj needs the reference scene")
    scene_ref = cli_io.read_scene(reference, cfg.field.num_classes)
    grid = build_occupancy_grid(scene_ref, cfg.transfer.cell_size)
    waypoints, _ = cli_io.read_trajectory(input_path)

    regions = None
    if len(candidates) > 1:
        if target is None:
            raise ValidationError("several regions need the target scene")
        scene_tgt = cli_io.read_scene(target, cfg.field.num_classes)
        regions = _regions(scene_tgt, [c[0] for c in candidates],
                           cfg.generation.pairs.roi_points)
        rng = cli_io.task_rng(cfg.seed, "align")
        samples = sample_isometry_points(regions, rng, cfg.transfer.n_rand)
        chosen, maps, cost = multi_roi_align(candidates, samples, rng,
                                             cfg.transfer.iterations)
        L.info("chose candidates {} with isometry cost {:.4f}".format(
            chosen, cost))
    else:
        maps = [candidates[0][0]]

    result, status = long_trajectory_transfer(
        maps, waypoints.points, grid, rois=regions,
        samples_per_segment=cfg.transfer.samples_per_segment)
    L.info("segments: {} planned, {} fallback".format(
        status.count("astar"), status.count("fallback")))
    cli_io.write_trajectory(result, out, status)


@cli.command()
@click.option("-c", "--checkpoint", required=True, help="trained field")
@click.option("-t", "--target", required=True, help="target scene")
@click.option("-r", "--reference", required=True, help="reference scene")
@click.option("-q", "--query", required=True, nargs=3, type=float,
              help="query point x y z in the target scene")
@click.option("--resolution", type=float, default=0.1,
              help="grid spacing in meters")
@click.option("-z", "--height", type=float, default=None,
              help="horizontal slice height, default the full volume")
@click.option("-o", "--out", required=True, help="output table")
@click.pass_obj
def heatmap(cfg, checkpoint, target, reference, query, resolution, height,
            out):
    '''descriptor distance between a query and the reference scene.'''
    field = _load_field(cfg, checkpoint)
    scene_tgt = cli_io.read_scene(target, cfg.field.num_classes)
    scene_ref = cli_io.read_scene(reference, cfg.field.num_classes)
    table = field_distance_grid(field, scene_tgt, np.array(query), scene_ref,
                                resolution, height)
    cli_io.write_table(table, out)
    L.info("{} grid values written to {}".format(len(table), out))


@cli.command("check-config")
@click.option("-o", "--out", default=None,
              help="also write the resolved configuration")
@click.pass_obj
def check_config(cfg, out):
    '''compare the configuration with the published constants.'''
    if out is not None:
        cli_io.dump_config(cfg, out)
    differences = cli_io.check_defaults(cfg)
    for path, expected, actual in differences:
        L.warning("{}: {} differs from {}".format(path, actual, expected))
    if differences:
        raise ValidationError("{} constants differ from the published "
                              "values".format(len(differences)))
    L.info("all published constants in place")


def main(argv=None):
    '''run the command line, returning the exit code.'''
    argv = sys.argv[1:] if argv is None else argv
    try:
        cli.main(args=list(argv), prog_name="scenemap",
                 standalone_mode=False)
    except NumericError as exc:
        L.error("numeric failure: {}".format(exc))
        return 2
    except ValidationError as exc:
        L.error("invalid input: {}".format(exc))
        return 1
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
