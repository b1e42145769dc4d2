"""Multi-objective robust architecture search at desk scale."""
