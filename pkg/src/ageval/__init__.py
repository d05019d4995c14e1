"""agent-dag-eval: DAG-based evaluation of agent execution traces with root-cause attribution"""
