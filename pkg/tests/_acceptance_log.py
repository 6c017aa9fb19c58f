"""Registry the acceptance tests fill with verdict lines.

Each acceptance test appends exactly one line here before asserting;
conftest replays the collected lines in the terminal summary so the
per-criterion verdicts are visible even when every test passes.
"""

LINES = []
