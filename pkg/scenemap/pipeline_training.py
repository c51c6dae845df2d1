"""===========================
Pipeline training
===========================

Overview
========

This pipeline generates a procedural toy dataset of furnished rooms,
training triplets and evaluation pairs, and trains a contextual
descriptor field on it by contrastive learning.

Pipeline tasks
==============

* Writing the run configuration from the ``scenemap`` section of
  pipeline.yml.
* Generating rooms, triplets and evaluation pairs (gen-data).
* Training the descriptor field (train).
* Checking the configuration against the published constants.

Usage
=====

To generate the config file run::

    scenemap training config

Edit the ``scenemap`` section of pipeline.yml, then run::

    scenemap training make full -v5

You can run the pipeline locally (without a cluster) using --local.

Pipeline output
===============

``dataset.dir/``
    scenes, triplets, evaluation pairs and ``manifest.tsv``
``field.dir/field.bundle``
    the trained field checkpoint
``field.dir/training_log.tsv``
    loss and best loss per step


Code
====

"""
import sys
import os
import yaml
from ruffus import *
import cgatcore.iotools as iotools
import cgatcore.pipeline as P
import cgatcore.experiment as E

# load options from the config file
PARAMS = P.get_parameters(
    ["%s/pipeline.yml" % os.path.splitext(__file__)[0],
     "../pipeline.yml",
     "pipeline.yml"])


@originate("run_config.yml")
def write_config(outfile):
    '''write the scenemap section of pipeline.yml as a run config.'''

    with iotools.open_file(outfile, "w") as outf:
        yaml.safe_dump(dict(PARAMS.get("scenemap") or {}), outf,
                       sort_keys=True)
    E.info("run configuration written to {}".format(outfile))


@transform(write_config,
           regex("run_config.yml"),
           r"dataset.dir/manifest.tsv")
def gen_data(infile, outfile):
    '''generate rooms, training triplets and evaluation pairs.'''

    PYTHON_ROOT = os.path.join(os.path.dirname(__file__), "python/")
    outdir = os.path.dirname(outfile)

    statement = '''python %(PYTHON_ROOT)s/scene_analogy.py
                   --config=%(infile)s
                   gen-data --out-dir=%(outdir)s > %(outdir)s.log'''

    P.run(statement, job_options=PARAMS.get("job_options", ""))


@follows(mkdir("field.dir"))
@transform(gen_data,
           regex("dataset.dir/manifest.tsv"),
           add_inputs(write_config),
           r"field.dir/field.bundle")
def train(infiles, outfile):
    '''train the descriptor field on the generated rooms.'''

    manifest, config = infiles
    dataset = os.path.dirname(manifest)
    PYTHON_ROOT = os.path.join(os.path.dirname(__file__), "python/")

    statement = '''python %(PYTHON_ROOT)s/scene_analogy.py
                   --config=%(config)s
                   train --dataset-dir=%(dataset)s --out=%(outfile)s
                   --log=field.dir/training_log.tsv > %(outfile)s.log'''

    P.run(statement, job_options=PARAMS.get("job_options", ""))


@transform(write_config,
           suffix(".yml"),
           ".check")
def check_config(infile, outfile):
    '''report constants that differ from the published values.'''

    PYTHON_ROOT = os.path.join(os.path.dirname(__file__), "python/")

    statement = '''python %(PYTHON_ROOT)s/scene_analogy.py
                   --config=%(infile)s
                   check-config > %(outfile)s || true'''

    P.run(statement)


@follows(train, check_config)
def full():
    '''
    A placeholder function that serves as a checkpoint
    to run all previous ruffus tasks and ensure that all
    previous tasks are completed.
    '''
    pass


def main(argv=None):
    if argv is None:
        argv = sys.argv
    P.main(argv)


if __name__ == "__main__":
    sys.exit(P.main(sys.argv))
