'''
scenemap - scene analogies between 3D scenes
============================================

:Tags: 3D scenes

To run a workflow, type::

    scenemap <workflow> [workflow options] [workflow arguments]

To run a single command, type::

    scenemap <command> [command options]

For this message and a list of available keywords type::

    scenemap --help

To get help for a specific workflow or command, type::

    scenemap <workflow> --help
'''

import glob
import importlib
import os
import re
import sys

import scenemap
from scenemap.python import scene_analogy


def printListInColumns(items, ncolumns):
    '''output list *items* in *ncolumns*.'''
    ll = len(items)

    if ll == 0:
        return ""

    max_width = max([len(x) for x in items]) + 3
    n = ll // ncolumns
    if ll % ncolumns != 0:
        n += 1

    # build columns
    columns = [items[x * n:x * n + n] for x in range(ncolumns)]

    # pad short columns
    for column in columns:
        column.extend([''] * (n - len(column)))

    # convert to rows
    rows = list(zip(*columns))

    # build pattern for a row
    p = '%-' + str(max_width) + 's'
    pattern = ' '.join([p for x in range(ncolumns)])

    return '\n'.join([pattern % row for row in rows])


def workflows():
    '''names of the available workflows.'''
    path = os.path.abspath(os.path.dirname(scenemap.__file__))
    return sorted(os.path.basename(x)[len("pipeline_"):-len(".py")]
                  for x in glob.glob(os.path.join(path, "pipeline_*.py")))


def main(argv=None):

    argv = sys.argv if argv is None else argv

    if len(argv) == 1 or argv[1] == "--help" or argv[1] == "-h":
        print((globals()["__doc__"]))
        print("The list of available workflows are:\n")
        print("{}\n".format(printListInColumns(workflows(), 2)))
        print("The list of available commands are:\n")
        print("{}\n".format(printListInColumns(
            sorted(scene_analogy.cli.commands), 2)))
        return 0

    # commands take precedence over workflows of the same name
    command = re.sub("-", "_", argv[1])
    if argv[1] in scene_analogy.cli.commands or command not in workflows():
        return scene_analogy.main(argv[1:])

    # the workflow sees its own name as argv[0]
    module = importlib.import_module("scenemap.pipeline_{}".format(command))
    return module.main(argv[1:])


if __name__ == "__main__":
    sys.exit(main())
