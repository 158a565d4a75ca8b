"""gmpslab: a desk-scale laboratory for meta-learning fast reinforcement learners.

The library meta-trains a policy initialization whose inner loop is a policy
gradient step and whose outer loop imitates per-task experts, alongside
baseline trainers and an exact tabular checker for the imitation-error bound.
"""

__version__ = "0.1.0"
