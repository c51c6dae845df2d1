'''
errors.py - exception types shared by the scenemap modules
==========================================================

Validation problems derive from :class:`ValueError` and numerical
failures from :class:`ArithmeticError` so callers that do not know
about scenemap can still catch them sensibly.  The command script
maps them onto exit codes 1 and 2.
'''


class ScenemapError(Exception):
    '''base class of all scenemap errors.'''


class ValidationError(ScenemapError, ValueError):
    '''bad input: out of range argument, unknown id, malformed file.'''


class InfeasibleError(ValidationError):
    '''assignment problem without a finite solution.'''


class NumericError(ScenemapError, ArithmeticError):
    '''non-finite values, divergence or a singular system.'''
