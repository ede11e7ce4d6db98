"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: configuration problems are
exit 2, numerical failures exit 3, validation failures exit 4.
"""


class ConfigError(ValueError):
    """A configuration file or argument set is malformed or inconsistent."""


class NumericsError(RuntimeError):
    """A numerical routine failed to converge or produced invalid values."""


class GridCoverageError(NumericsError):
    """The rate lattice is too narrow for the transition measures it must carry."""


class DegenerateBackwardError(ValueError):
    """Conditioning on an initial age u with H_i(u) ~ 1 (zero-probability event)."""
