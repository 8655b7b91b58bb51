"""fedsim: a modular federated-learning simulator.

Typical use::

    from fedsim.config import load_config
    from fedsim.plan import assemble
    from fedsim.experiment import run_plan

    result = run_plan(assemble(load_config("configs/fedavg_iid.yaml")), "runs/demo")
"""

__version__ = "0.1.0"
