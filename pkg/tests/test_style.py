'''test_style
=============

Purpose
-------

Runs pycodestyle tests over the package.

This script is best run within pytest::

   pytest tests/test_style.py

'''
import glob
import os

import pycodestyle
import pytest

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..")

# DIRECTORIES to examine
EXPRESSIONS = (
    ('FirstLevel', 'scenemap/*.py'),
    ('SecondLevel', 'scenemap/python/*.py'))

# Codes to ignore in the pycodestyle BaseReport
IGNORE = set(('E101',  # indentation contains mixed spaces and tabs
              'E201',  # whitespace after '('
              'E202',  # whitespace before ')'
              'E122',  # continuation line missing indentation or outdented
              'E265',  # block comment should start with '# '
              'E501',  # line too long (82 > 79 characters)
              'E502',  # the backslash is redundant between brackets
              'E731',  # do not assign a lambda expression, use a def
              'E402',  # module level import not at top of file
              'F403',
              'W191',
              'W291',
              'W293',
              'W391',
              'W503',  # line break before binary operator
              'W504',  # line break after binary operator
              'W601',
              'W602',
              'files',
              'directories',
              'physical lines',
              'logical lines',))


def style_files():
    files = []
    for label, expression in EXPRESSIONS:
        files.extend(sorted(glob.glob(os.path.join(ROOT, expression))))
    return [os.path.abspath(f) for f in files if not os.path.isdir(f)]


@pytest.mark.parametrize("filename", style_files())
def test_style(filename):
    '''check style of filename.
    '''

    p = pycodestyle.StyleGuide(quiet=True)
    report = p.check_files([filename])

    # count errors/warning excluding
    # those to ignore
    take = [y for x, y
            in list(report.counters.items()) if x not in IGNORE]
    found = ['%s:%i' % (x, y) for x, y
             in list(report.counters.items()) if x not in IGNORE]
    total = sum(take)
    assert total == 0, 'pycodestyle violations: %s' % ','.join(found)
