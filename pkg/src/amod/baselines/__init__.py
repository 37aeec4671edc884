"""Reference solvers for the full problem and its concave relaxation."""
