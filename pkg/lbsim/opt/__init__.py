from .optimizer import NlpProblem, NlpSolution, SolverConfig, brute_force, check_feasibility, solve
