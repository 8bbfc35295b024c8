from dataclasses import dataclass, field
import time


@dataclass
class RunContext:
    """
    A context object that carries the identity and shared settings of one run
    (a single train/eval invocation or one cell of an experiment grid) so they
    do not have to be threaded through every call.

    Attributes:
        ident: Dictionary containing the run id and the grid cell name.
        verbose: Verbosity level for logging.
        seed: Base seed the run derives all of its random streams from.
    """

    ident: dict[str, str]
    verbose: int = 0
    seed: int = 0
    start_time: float = field(default_factory=time.time)

    @property
    def cell(self) -> str:
        """The grid cell name, or "main" for single runs."""
        return self.ident.get("cell", "main")

    def child(self, cell: str, seed: int | None = None) -> "RunContext":
        """
        Derive the context of a sub-run (a grid cell) sharing the run id.

        Args:
            cell: Name of the sub-run.
            seed: Seed of the sub-run; defaults to the parent's seed.

        Returns:
            RunContext: The derived context.
        """
        return RunContext(
            ident={"id": self.ident.get("id", "000000"), "cell": cell},
            verbose=self.verbose,
            seed=self.seed if seed is None else seed,
        )

    def get_elapsed_time(self) -> float:
        """
        Get the elapsed time since the run started.

        Returns:
            float: Elapsed time in seconds
        """
        return time.time() - self.start_time
