import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnlab.config import (
    FIELDS,
    ConfigError,
    LinearSchedule,
    TrainConfig,
    dump_config,
    parse_config,
    parse_schedule,
)


class TestParse:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == TrainConfig()
        assert cfg.epsilon == 0.1 and cfg.sigma == 0.1 and cfg.mcts_rounds == 50

    def test_keys_and_comments(self):
        text = "# comment\n\nspace.vocab_size = 3\ntrainer.variant=gan_scheduler\ntrainer.scheduler=linear(1, 0.1)\n"
        cfg = parse_config(text)
        assert cfg.vocab_size == 3
        assert cfg.scheduler == LinearSchedule(1.0, 0.1)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="trainer.varient"):
            parse_config("trainer.varient=gcn")

    def test_bad_line(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("trainer.variant gcn")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config("trainer.iters=many")

    def test_overrides(self):
        assert parse_config("trainer.seed=1", {"trainer.seed": "7"}).seed == 7

    @pytest.mark.parametrize(
        "text",
        [
            "trainer.variant=gan_scheduler",
            "trainer.variant=gcn\ntrainer.scheduler=linear(1,0)",
            "trainer.variant=bogus",
            "trainer.qhat=beam",
            "trainer.batch_size=0",
            "mixture.epsilon=0",
            "mixture.sigma=1.5",
            "space.vocab_size=10\nspace.max_len=8",
            "curves.temps=1.0,0.5",
            "mcts.mode=sideways",
        ],
    )
    def test_invalid_configs(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_schedule_forms(self):
        assert parse_schedule("none") is None
        assert parse_schedule("linear(0.5,1e-3)") == LinearSchedule(0.5, 1e-3)
        with pytest.raises(ConfigError):
            parse_schedule("cosine(1,0)")


class TestDerived:
    def test_mixture_and_mcts(self):
        assert parse_config("trainer.qhat=p").mixture is None
        cfg = parse_config("trainer.qhat=mcts\nspace.num_contexts=2")
        assert cfg.mixture.guided_kind == "mcts"
        assert cfg.mcts.mode == "conditional"
        assert parse_config("trainer.qhat=mcts").mcts.mode == "unconditional"

    def test_target_seed_defaults_to_seed(self):
        assert parse_config("trainer.seed=5").effective_target_seed == 5
        assert parse_config("trainer.seed=5\ntarget.seed=2").effective_target_seed == 2


class TestRoundTrip:
    def test_every_key_is_dumped(self):
        text = dump_config(TrainConfig())
        assert [line.split("=")[0] for line in text.splitlines()] == list(FIELDS)

    @given(
        st.sampled_from(["gcn", "gan", "gan_scheduler", "maligan", "exp_d"]),
        st.sampled_from(["p", "nucleus", "mcts"]),
        st.integers(1, 4),
        st.integers(1, 3),
        st.floats(1e-4, 10, allow_nan=False),
        st.floats(0.01, 1.0),
        st.one_of(st.none(), st.integers(0, 1000)),
    )
    @settings(max_examples=60, deadline=None)
    def test_parse_dump_parse(self, variant, qhat, vocab, max_len, lr, eps, tseed):
        sched = LinearSchedule(1.0, 0.1) if variant == "gan_scheduler" else None
        cfg = TrainConfig(
            vocab_size=vocab, max_len=max_len, variant=variant, qhat=qhat, lr_gen=lr,
            epsilon=eps, scheduler=sched, target_seed=tseed, target_probs=(0.25, 0.75),
        )
        once = parse_config(dump_config(cfg))
        assert once == cfg
        assert dump_config(once) == dump_config(cfg)
