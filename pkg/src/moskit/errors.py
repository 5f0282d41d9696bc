"""Exception hierarchy shared across the package.

DataError covers malformed inputs (manifests, feature files, audio);
NumericError covers non-finite values surfacing from the math. The CLI
maps them to exit codes 2 and 3 respectively.
"""


class MoskitError(Exception):
    pass


class DataError(MoskitError):
    pass


class NumericError(MoskitError):
    pass
