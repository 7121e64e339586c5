"""edusim: a deterministic, event-sourced simulator of classrooms and recess groups."""

__version__ = "0.1.0"
