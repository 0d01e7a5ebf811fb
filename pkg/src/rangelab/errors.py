"""Error types shared across the package.

ContractError maps to CLI exit code 2, ResourceError to exit code 3.
"""


class ContractError(ValueError):
    """A documented precondition or input contract was violated."""


class ResourceError(RuntimeError):
    """A computation was refused because it exceeds a configured budget."""
