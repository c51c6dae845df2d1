"""===========================
Pipeline evaluate
===========================

Overview
========

This pipeline scores a trained descriptor field on the evaluation
pairs of a generated dataset.  It runs the full coarse-to-fine map
estimation and the affine-only ablation (no local displacement map)
and merges both metric reports into one comparison table.

Pipeline tasks
==============

* Writing the run configuration from the ``scenemap`` section of
  pipeline.yml.
* Evaluating the full pipeline.
* Evaluating the affine-only ablation.
* Merging the aggregate rows of both reports.

Usage
=====

Run ``scenemap training make full`` first, or point ``dataset_dir`` and
``checkpoint`` in pipeline.yml at existing outputs.  Then::

    scenemap evaluate config
    scenemap evaluate make full -v5

Pipeline output
===============

``reports.dir/full.tsv`` and ``reports.dir/affine_only.tsv``
    per-pair metric rows followed by the aggregate row ``all``
``comparison.tsv``
    the aggregate rows side by side, one row per variant


Code
====

"""
import sys
import os
import yaml
import pandas as pd
from ruffus import *
import cgatcore.iotools as iotools
import cgatcore.pipeline as P
import cgatcore.experiment as E

# load options from the config file
PARAMS = P.get_parameters(
    ["%s/pipeline.yml" % os.path.splitext(__file__)[0],
     "../pipeline.yml",
     "pipeline.yml"])

# variant name -> extra options of scene_analogy.py
VARIANTS = {"full": "",
            "affine_only": "--ablate=displacement"}


def merge_reports(infiles):
    '''
    This function takes the aggregate row of every metric report
    and returns them as one dataframe indexed by variant.
    '''

    rows = []
    for infile in infiles:
        name = os.path.basename(infile).replace(".tsv", "")
        table = pd.read_table(infile, sep="\t")
        row = table[table["pair"] == "all"].iloc[0].drop("pair")
        row.name = name
        rows.append(row)

    return pd.DataFrame(rows)


@originate("run_config.yml")
def write_config(outfile):
    '''write the scenemap section of pipeline.yml as a run config.'''

    with iotools.open_file(outfile, "w") as outf:
        yaml.safe_dump(dict(PARAMS.get("scenemap") or {}), outf,
                       sort_keys=True)
    E.info("run configuration written to {}".format(outfile))


@follows(mkdir("reports.dir"))
@split(write_config,
       ["reports.dir/{}.tsv".format(v) for v in sorted(VARIANTS)])
def evaluate(infile, outfiles):
    '''score the full pipeline and its ablation on every pair.'''

    PYTHON_ROOT = os.path.join(os.path.dirname(__file__), "python/")
    pairs = os.path.join(PARAMS["dataset_dir"], "pairs")
    checkpoint = PARAMS["checkpoint"]

    for outfile in outfiles:
        variant = os.path.basename(outfile).replace(".tsv", "")
        options = VARIANTS[variant]
        statement = '''python %(PYTHON_ROOT)s/scene_analogy.py
                       --config=%(infile)s %(options)s
                       eval --checkpoint=%(checkpoint)s --pairs-dir=%(pairs)s
                       --out=%(outfile)s > %(outfile)s.log'''

        P.run(statement, job_options=PARAMS.get("job_options", ""))


@merge(evaluate, "comparison.tsv")
def compare(infiles, outfile):
    '''aggregate metrics of every variant side by side.'''

    df = merge_reports(infiles)
    df.to_csv(outfile, sep="\t", index_label="variant")
    E.info("comparison of {} variants written to {}".format(len(df), outfile))


@follows(compare)
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
