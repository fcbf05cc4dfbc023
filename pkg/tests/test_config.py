import math

import pytest

from fedbayes.config import ExperimentConfig, load_config, save_config


class TestExperimentConfig:
    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig(engine="dp_pvi", distribution="C", seeds=(0, 3, 4), epsilon_max=0.5,
                               kappa_grid=(0.1, 0.5), rho_grid=(0.0,), learning_rate=0.25,
                               fixed_delta=1e-5, out=str(tmp_path))
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_pvi_defaults(self):
        local = ExperimentConfig(engine="pvi").local_config()
        assert (local.batch_size, local.learning_rate, local.n_steps, local.damping) == (100, 2.0, 25, 0.1)

    def test_dp_defaults(self):
        run = ExperimentConfig(engine="dp_pvi").run_config()
        p = run.privacy
        assert (p.clip_c, p.noise_scale, p.sample_rate) == (75.0, 5.0, 0.02)
        assert (run.local.learning_rate, run.local.n_steps, run.local.damping) == (0.5, 25, 0.1)
        assert run.local.persistent_accumulator

    def test_global_vi_defaults(self):
        local = ExperimentConfig(engine="global_vi").local_config()
        assert (local.batch_size, local.learning_rate) == (100, 0.05)

    def test_global_vi_ignores_round_overrides(self):
        cfg = ExperimentConfig(engine="global_vi", n_steps=7, damping=0.5)
        local = cfg.local_config()
        assert local.n_steps == 1 and local.damping == 1.0

    def test_overrides(self):
        cfg = ExperimentConfig().with_overrides(engine="dp_pvi", epsilon_max=None, seeds=[1, 2])
        assert cfg.engine == "dp_pvi" and cfg.epsilon_max == 1.0 and cfg.seeds == (1, 2)
        assert cfg.run_config().privacy.epsilon_max == 1.0

    def test_explicit_rho_kappa(self):
        cfg = ExperimentConfig(rho=0.9, kappa=0.3)
        spec = cfg.partition_spec()
        assert (spec.rho, spec.kappa) == (0.9, 0.3)
        assert cfg.distribution_label == "rho=0.9,kappa=0.3"
        assert ExperimentConfig(distribution="b").partition_spec().rho == 0.9

    def test_max_communications_only_for_main_engine(self):
        cfg = ExperimentConfig(engine="pvi", max_communications=17)
        assert cfg.run_config().max_communications == 17
        assert cfg.run_config("global_vi").max_communications == 50000

    def test_infinite_budget(self):
        assert math.isinf(ExperimentConfig(epsilon_max=math.inf).run_config().privacy.epsilon_max)

    @pytest.mark.parametrize("kwargs", [
        dict(engine="adam"), dict(distribution="E"), dict(rho=0.5), dict(missing="zero"),
        dict(seeds=()), dict(last=0), dict(noise_scale=-1.0), dict(sample_rate=1.5),
        dict(learning_rate=-0.1), dict(global_vi_scaling="none"), dict(m_clients=0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ExperimentConfig(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ExperimentConfig.from_dict({"engin": "pvi"})
