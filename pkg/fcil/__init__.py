"""fcil-lab: federated class-incremental learning with condensed rehearsal exemplars."""

__version__ = "0.1.0"
