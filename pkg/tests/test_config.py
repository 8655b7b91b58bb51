from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsim.config import (
    ConfigError,
    apply_env,
    config_from_dict,
    config_to_dict,
    load_config,
    parse_config,
    serialize_config,
    with_overrides,
)
from fedsim.plan import AssemblyError, assemble
from fedsim.registry import RegistryError, default_registry

CONFIGS = sorted((Path(__file__).resolve().parent.parent / "configs").glob("*.yaml"))

MINIMAL = """
client_manager: {mode: sequential, client_count: 4}
server: {aggregator: fedavg}
benchmark: {dataset: synthetic}
"""


def test_minimal_document_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.global_.seed == 0
    assert cfg.global_.rounds == 20
    assert cfg.benchmark.preload is False
    assert cfg.benchmark.io_latency_us == 0
    assert cfg.logging.level == "info"
    assert cfg.client_manager.client_count == 4
    assert cfg.client_manager.mode.name == "sequential"


def test_misspelled_section_names_valid_sections():
    with pytest.raises(ConfigError) as err:
        parse_config("clientmgr: {client_count: 4}\n")
    msg = str(err.value)
    assert "clientmgr" in msg
    for section in ("global", "server", "client", "client_manager", "queue", "benchmark", "logging"):
        assert section in msg


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="rouns"):
        parse_config("global: {rouns: 3}\n")


def test_type_mismatch_reports_expected_and_found():
    with pytest.raises(ConfigError, match="expected int, found str"):
        parse_config("global: {rounds: three}\n")
    with pytest.raises(ConfigError, match="found bool"):
        parse_config("global: {seed: true}\n")


def test_syntax_error_reports_position():
    with pytest.raises(ConfigError, match=r"line 2, column 19"):
        parse_config("global: {seed: 1}\nserver: aggregator: fedavg\n")


@pytest.mark.parametrize("doc", ["global: {rounds: 0}", "client_manager: {client_count: 0}"])
def test_positive_counts(doc):
    with pytest.raises(ConfigError, match=">= 1"):
        parse_config(doc)


def test_table2_config_echoes_values():
    cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "paper_table2.yaml")
    trainer = assemble(cfg).trainer
    assert cfg.client_manager.client_count == 30
    assert (trainer.lr, trainer.local_epochs, trainer.batch_size) == (0.01, 2, 64)
    echoed = parse_config(serialize_config(cfg))
    assert echoed.client.trainer.params == {"lr": 0.01, "local_epochs": 2, "batch_size": 64}


@pytest.mark.parametrize("path", CONFIGS, ids=[p.stem for p in CONFIGS])
def test_shipped_configs_resolve_and_round_trip(path):
    cfg = load_config(path)
    registry = default_registry()
    for ref in cfg.module_refs():
        registry.resolve(ref)
    once = parse_config(serialize_config(cfg))
    assert once == cfg
    assert serialize_config(once) == serialize_config(cfg)


_seeds = st.integers(0, 2**31)
_docs = st.fixed_dictionaries(
    {
        "global": st.fixed_dictionaries({"seed": _seeds, "rounds": st.integers(1, 100)}),
        "server": st.fixed_dictionaries(
            {
                "aggregator": st.sampled_from(["fedavg", "fednova", "fedadam"]),
                "scheduler": st.builds(
                    lambda n, f: {"name": n, "params": {"fraction": f}},
                    st.sampled_from(["random", "round_robin"]),
                    st.floats(0.01, 1.0),
                ),
                "test_fraction": st.floats(0.0, 0.5),
            }
        ),
        "client_manager": st.fixed_dictionaries({"client_count": st.integers(1, 50)}),
        "benchmark": st.fixed_dictionaries(
            {
                "preload": st.booleans(),
                "io_latency_us": st.integers(0, 10_000),
                "partition": st.one_of(
                    st.just("iid"),
                    st.builds(lambda b, s: {"variant": "dirichlet", "beta": b, "seed": s}, st.floats(0.01, 100), _seeds),
                ),
            }
        ),
    }
)


@given(_docs)
def test_parse_serialize_parse_is_a_fixed_point(doc):
    cfg = config_from_dict(doc)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert config_to_dict(again) == config_to_dict(cfg)


def test_env_overrides_output_dir():
    cfg = apply_env(parse_config(MINIMAL), {"FEDSIM_OUTPUT_DIR": "/tmp/elsewhere"})
    assert cfg.global_.output_dir == "/tmp/elsewhere"
    assert apply_env(parse_config(MINIMAL), {}).global_.output_dir == "runs/default"


def test_cli_style_overrides():
    cfg = with_overrides(parse_config(MINIMAL), mode="concurrent", seed=9)
    assert cfg.client_manager.mode.name == "concurrent"
    assert cfg.global_.seed == 9


def test_profile_counts_must_cover_clients():
    with pytest.raises(ConfigError, match="profiles"):
        parse_config("client: {profiles: [{count: 3}]}\nclient_manager: {client_count: 4}\n")


# -- registry ------------------------------------------------------------------------------


def test_builtin_schedulers_resolve():
    from fedsim.config import ModuleRef

    reg = default_registry()
    assert callable(reg.resolve(ModuleRef("scheduler", "random")))
    make = reg.build(ModuleRef("scheduler", "round_robin", {"fraction": 0.5}), {"seed": 0})
    sched = make()
    assert [sched.select(r, [1, 2, 3, 4]) for r in range(3)] == [[1, 2], [3, 4], [1, 2]]


def test_unknown_aggregator_lists_available_names():
    from fedsim.config import ModuleRef

    with pytest.raises(RegistryError) as err:
        default_registry().resolve(ModuleRef("aggregator", "nonexistent"))
    msg = str(err.value)
    for name in ("fedavg", "fednova", "fedadam", "fedasync", "buffered", "pfedme"):
        assert name in msg
    assert default_registry().names("aggregator") == sorted(
        ["fedavg", "fednova", "fedadam", "fedasync", "buffered", "pfedme"]
    )


def test_close_misspelling_gets_a_suggestion():
    from fedsim.config import ModuleRef

    with pytest.raises(RegistryError, match="fedavg"):
        default_registry().resolve(ModuleRef("aggregator", "fedavgg"))


def test_registration_is_write_once_and_supports_dotted_namespaces():
    from fedsim.config import ModuleRef
    from fedsim.registry import Registry

    reg = Registry()
    reg.register("scheduler", "lab.greedy", lambda params, ctx: "greedy")
    assert reg.build(ModuleRef("scheduler", "lab.greedy"), {}) == "greedy"
    assert reg.names("scheduler") == ["lab.greedy"]
    with pytest.raises(RegistryError, match="already registered"):
        reg.register("scheduler", "lab.greedy", lambda params, ctx: None)
    with pytest.raises(RegistryError):
        reg.resolve(ModuleRef("scheduler", "lab"))


def test_unknown_category_rejected():
    from fedsim.config import ModuleRef

    with pytest.raises(ConfigError, match="category"):
        ModuleRef("optimizer", "sgd")


def test_unknown_module_param_is_an_error():
    with pytest.raises(AssemblyError, match="lr_typo"):
        assemble(parse_config("client: {trainer: {name: sgd, params: {lr_typo: 0.1}}}\n"))


# -- assembly ---------------------------------------------------------------------------------


def test_four_client_sequential_plan():
    plan = assemble(parse_config(MINIMAL))
    assert len(plan.profiles) == 4
    assert [p.id for p in plan.profiles] == [1, 2, 3, 4]
    assert plan.mode.name == "sequential"
    assert plan.benchmark.store is None


def test_preload_exposes_store():
    plan = assemble(parse_config("benchmark: {preload: true}\n"))
    assert plan.benchmark.store is not None


def test_distributed_needs_a_node():
    with pytest.raises(ConfigError, match="distributed mode requires ≥1 node"):
        assemble(parse_config("client_manager: {mode: {name: distributed, params: {nodes: []}}}\n"))


def test_distributed_counts_must_sum_to_client_count():
    doc = "client_manager: {client_count: 4, mode: {name: distributed, params: {nodes: [{address: 'h:1', client_count: 3}]}}}\n"
    with pytest.raises(ConfigError, match="sum to 3"):
        assemble(parse_config(doc))


def test_assembly_error_names_the_module():
    with pytest.raises(AssemblyError) as err:
        assemble(parse_config("server: {aggregator: {name: fedasync, params: {alpha: 2.0}}}\n"))
    assert "aggregator module 'fedasync'" in str(err.value)


def test_two_assemblies_are_identical():
    a, b = assemble(parse_config(MINIMAL)), assemble(parse_config(MINIMAL))
    assert a.initial_params.equals(b.initial_params)
    assert a.profiles == b.profiles
    assert a.make_scheduler().select(3, [1, 2, 3, 4]) == b.make_scheduler().select(3, [1, 2, 3, 4])


def test_readme_config_block_is_valid_and_matches_defaults():
    import re
    from pathlib import Path

    import yaml

    from fedsim.config import ExperimentConfig, config_from_dict
    from fedsim.plan import assemble

    text = (Path(__file__).parents[1] / "README.md").read_text(encoding="utf-8")
    block = re.search(r"## Config format.*?```yaml\n(.*?)```", text, re.S).group(1)
    cfg = config_from_dict(yaml.safe_load(block))
    assemble(cfg)
    assert cfg.server == ExperimentConfig().server
    assert cfg.client.trainer.params["lr"] == 0.01 and cfg.global_.rounds == ExperimentConfig().global_.rounds
