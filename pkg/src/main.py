import os
import sys
import json
import argparse
from functools import partial
import numpy as np
import scipy
import sklearn
from typing import Any, Dict, List, Optional
from threadpoolctl import threadpool_limits

from config import RUNTIME_CONFIG, TRAINING_CONFIG, BENCH_CONFIG
from log_utils import setup_logger
from sim_types import SubDynError, ConfigError, StateSequence, Frame
from scenarios import (
    SCENARIO_NAMES, ScenarioSpec, build_scenario, generate_dataset, split_dataset
)
from implicit_solver import ImplicitSolver, SolverConfig
from sequence_io import save_dataset, load_dataset, load_sequence, save_sequence
from relative_encoding import create_relative_encoding
from autoencoder import AutoencoderTrainer, save_autoencoder, load_autoencoder, encode
from integrator_training import IntegratorTrainer, save_integrator, load_integrator
from rollout_eval import (
    rollout, decode_trajectory, scripted_bc_values, evaluate_rollout, write_metrics_csv,
    bench, export_obj_sequence, config_hash
)

COMMANDS = ('gen', 'train-ae', 'train-int', 'rollout', 'bench', 'eval', 'export')


def build_parser() -> argparse.ArgumentParser:
    """Subcommand parser; every subcommand accepts the full flag set"""
    parser = argparse.ArgumentParser(
        prog='subdyn',
        description="Simulate elastic bodies, learn latent spaces and roll out latent integrators",
    )
    subparsers = parser.add_subparsers(dest='command', metavar='{' + ','.join(COMMANDS) + '}')
    subparsers.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--scenario', choices=SCENARIO_NAMES, required=True)
    common.add_argument('--config', help="JSON file with scenario / solver / training overrides")
    common.add_argument('--out', default='out', help="Output directory")
    common.add_argument('--data', help="Directory of SDSQ1 sequences")
    common.add_argument('--sequence', help="Single SDSQ1 sequence file")
    common.add_argument('--ae', help="Autoencoder checkpoint")
    common.add_argument('--int', dest='integrator', help="Integrator checkpoint")
    common.add_argument('--frames', type=int)
    common.add_argument('--epochs', type=int)
    common.add_argument('--batch', type=int)
    common.add_argument('--lr', type=float)
    common.add_argument('--latent-dim', type=int)
    common.add_argument('--seed', type=int)
    common.add_argument('--steps', type=int)
    common.add_argument('--repeats', type=int)
    common.add_argument('--script', help="Label of the BC script to roll out")
    common.add_argument('--no-noise', action='store_true')
    common.add_argument('--no-balancing', action='store_true')
    common.add_argument('--supervised', action='store_true')

    helps = {
        'gen': "simulate the scenario's training sequences",
        'train-ae': "train the autoencoder on a dataset",
        'train-int': "train the latent integrator with a frozen autoencoder",
        'rollout': "autoregressive latent rollout of one BC script",
        'bench': "time the online and offline primitives",
        'eval': "rollout metrics against ground truth",
        'export': "write a sequence as OBJ frames",
    }
    for name in COMMANDS:
        subparsers.add_parser(name, parents=[common], help=helps[name])
    return parser


class SubDynCLI:
    """
    Resolves configuration (flags > config file > scenario defaults) and runs one command
    """

    def __init__(self, args: argparse.Namespace, argv: List[str]):
        self.args = args
        self.argv = argv
        self.logger = setup_logger('SubDynCLI')
        self.file_config = self._read_config(args.config)
        scenario_overrides = dict(self.file_config.get('scenario', {}))
        if args.frames is not None:
            scenario_overrides['frames'] = args.frames
        if args.latent_dim is not None:
            scenario_overrides['latent_dim'] = args.latent_dim
        self.scenario_overrides = scenario_overrides
        self.scenario: ScenarioSpec = build_scenario(args.scenario, scenario_overrides)
        self.seed = self.setting('seed', RUNTIME_CONFIG['default_seed'])
        self.solver = ImplicitSolver(SolverConfig.from_dict(self.file_config.get('solver')))

    @staticmethod
    def _read_config(path: Optional[str]) -> Dict[str, Any]:
        if not path:
            return {}
        try:
            with open(path, 'r') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config file {path}: {e}")

    def setting(self, name: str, default: Any) -> Any:
        """CLI flag, then config file, then default"""
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        return self.file_config.get(name, default)

    def require(self, name: str, value: Optional[str], is_dir: bool = False) -> str:
        if not value:
            raise ConfigError(f"'{self.args.command}' needs --{name}")
        exists = os.path.isdir(value) if is_dir else os.path.isfile(value)
        if not exists:
            raise ConfigError(f"--{name} path does not exist: {value}")
        return value

    def run(self) -> Dict[str, Any]:
        handlers = {
            'gen': self.run_gen,
            'train-ae': self.run_train_ae,
            'train-int': self.run_train_int,
            'rollout': self.run_rollout,
            'bench': self.run_bench,
            'eval': self.run_eval,
            'export': self.run_export,
        }
        os.makedirs(self.args.out, exist_ok=True)
        self.logger.info(f"Running {self.args.command} on {self.scenario.name} (seed {self.seed})")
        outputs = handlers[self.args.command]()
        self.write_manifest(outputs)
        return outputs

    def _training_split(self) -> List[StateSequence]:
        sequences = load_dataset(self.require('data', self.args.data, is_dir=True))
        if not sequences:
            raise ConfigError(f"No .sdsq files in {self.args.data}")
        return split_dataset(sequences, self.scenario).train

    def _find_script(self):
        scripts = list(self.scenario.eval_scripts) + list(self.scenario.sequences)
        label = self.args.script
        if label is None:
            return scripts[0]
        for script in scripts:
            if script.label == label:
                return script
        raise ConfigError(f"Unknown script '{label}' for {self.scenario.name}; "
                          f"choose from {[s.label for s in scripts]}")

    def run_gen(self) -> Dict[str, Any]:
        sequences = generate_dataset(self.scenario, solver=self.solver)
        paths = save_dataset(sequences, self.args.out)
        return {'sequences': paths}

    def run_train_ae(self) -> Dict[str, Any]:
        train = self._training_split()
        sim_object = self.scenario.build_object()
        encoding = create_relative_encoding(sim_object)
        trainer = AutoencoderTrainer(self.file_config.get('autoencoder'))
        ae, report = trainer.train(
            train, encoding, self.scenario.latent_dim, self.scenario.ae_hidden,
            epochs=self.setting('epochs', None), batch_size=self.setting('batch', None),
            lr=self.setting('lr', None), seed=self.seed)
        checkpoint = os.path.join(self.args.out, 'ae.sdwt')
        save_autoencoder(checkpoint, ae)
        report_path = os.path.join(self.args.out, 'ae_' + TRAINING_CONFIG['report_file'])
        report.write_jsonl(report_path)
        return {'checkpoint': checkpoint, 'report': report_path, 'summary': report.summary()}

    def run_train_int(self) -> Dict[str, Any]:
        train = self._training_split()
        ae = load_autoencoder(self.require('ae', self.args.ae))
        sim_object = self.scenario.build_object()
        trainer = IntegratorTrainer(self.file_config.get('integrator'))
        integrator, report = trainer.train(
            train, ae, sim_object, self.scenario.dt, self.scenario.integrator_hidden,
            epochs=self.setting('epochs', None), lr=self.setting('lr', None), seed=self.seed,
            noise=not self.args.no_noise, balancing=not self.args.no_balancing,
            supervised=self.args.supervised, use_bc=self.scenario.loss_uses_bc,
            w_bc=self.scenario.bc_penalty_weight, batch_size=self.setting('batch', None))
        checkpoint = os.path.join(self.args.out, 'integrator.sdwt')
        save_integrator(checkpoint, integrator, {
            'seed': self.seed,
            'training': report.kind,
            'noise': not self.args.no_noise,
            'balancing': not self.args.no_balancing,
        })
        report_path = os.path.join(self.args.out, 'int_' + TRAINING_CONFIG['report_file'])
        report.write_jsonl(report_path)
        return {'checkpoint': checkpoint, 'report': report_path, 'summary': report.summary()}

    def _load_models(self):
        ae = load_autoencoder(self.require('ae', self.args.ae))
        integrator = load_integrator(self.require('int', self.args.integrator))
        return ae, integrator

    def run_rollout(self) -> Dict[str, Any]:
        ae, integrator = self._load_models()
        sim_object = self.scenario.build_object()
        script = self._find_script()
        steps = self.setting('steps', script.frames - 2 if script.frames >= 3 else self.scenario.frames - 2)
        x0, x1 = self.scenario.start_frames(sim_object, script)
        z0, z1 = encode(ae, np.stack([x0, x1]))
        trajectory = rollout(integrator, ae, z0, z1, partial(self.scenario.bc_params_at, script=script),
                             steps, self.scenario.dt)
        frames = decode_trajectory(ae, trajectory,
                                   scripted_bc_values(self.scenario, sim_object, script, steps + 2))
        sequence = StateSequence(
            frames=[Frame(t, x, p) for t, (x, p) in enumerate(zip(frames, trajectory.p))],
            dt=self.scenario.dt, scenario=self.scenario.name,
            topology=sim_object.topology, bc_dim=self.scenario.bc_dim)
        sequence_path = os.path.join(self.args.out, 'rollout.sdsq')
        latents_path = os.path.join(self.args.out, 'latents.npy')
        save_sequence(sequence, sequence_path)
        np.save(latents_path, trajectory.as_array())
        return {'sequence': sequence_path, 'latents': latents_path, 'script': script.label, 'steps': steps}

    def run_bench(self) -> Dict[str, Any]:
        ae, integrator = self._load_models()
        sim_object = self.scenario.build_object()
        result = bench(sim_object, ae, integrator, self.scenario,
                       steps=self.setting('steps', 10),
                       repeats=self.setting('repeats', BENCH_CONFIG['repeats']),
                       solver=self.solver)
        path = os.path.join(self.args.out, 'bench.json')
        with open(path, 'w') as f:
            json.dump(result.to_dict(), f, indent=2)
        return {'bench': path, 'speedup': result.speedup}

    def run_eval(self) -> Dict[str, Any]:
        """Test split of --data (or --sequence); without either, the generalization scripts"""
        ae, integrator = self._load_models()
        sim_object = self.scenario.build_object()
        steps = self.setting('steps', None)
        if self.args.sequence:
            cases = [('sequence', load_sequence(self.require('sequence', self.args.sequence)), None)]
        elif self.args.data:
            sequences = load_dataset(self.require('data', self.args.data, is_dir=True))
            test = split_dataset(sequences, self.scenario).test
            cases = [(f'test_{i:03d}', s, None) for i, s in enumerate(test)]
        else:
            cases = []
            for script in self.scenario.eval_scripts:
                frames = script.frames if script.frames >= 3 else self.scenario.frames
                truth = self.solver.simulate(sim_object, None, self.scenario, frames, script)
                cases.append((script.label, truth, script))
        if not cases:
            raise ConfigError(f"Nothing to evaluate for {self.scenario.name}")

        summaries = {}
        for name, truth, script in cases:
            metrics = evaluate_rollout(self.scenario, sim_object, ae, integrator, truth, script, steps)
            write_metrics_csv(os.path.join(self.args.out, f'metrics_{name}.csv'),
                              {k: metrics[k] for k in ('rmse', 'bc_residual', 'kinetic_energy',
                                                       'kinetic_energy_gt')})
            summaries[name] = metrics['summary']
        path = os.path.join(self.args.out, 'metrics.json')
        with open(path, 'w') as f:
            json.dump(summaries, f, indent=2)
        return {'metrics': path, 'cases': list(summaries)}

    def run_export(self) -> Dict[str, Any]:
        sequence = load_sequence(self.require('sequence', self.args.sequence))
        paths = export_obj_sequence(sequence.positions(), sequence.topology, self.args.out)
        return {'files': len(paths), 'directory': self.args.out}

    def write_manifest(self, outputs: Dict[str, Any]):
        """Config, seed, argv and library versions next to the outputs"""
        config = {
            'command': self.args.command,
            'scenario': self.scenario.to_dict(),
            'scenario_overrides': self.scenario_overrides,
            'file_config': self.file_config,
            'flags': {k: v for k, v in vars(self.args).items() if k != 'command'},
        }
        manifest = {
            'argv': self.argv,
            'seed': self.seed,
            'config': config,
            'config_hash': config_hash(config),
            'versions': {
                'subdyn': RUNTIME_CONFIG['version'],
                'python': sys.version.split()[0],
                'numpy': np.__version__,
                'scipy': scipy.__version__,
                'scikit-learn': sklearn.__version__,
            },
            'outputs': outputs,
        }
        with open(os.path.join(self.args.out, 'manifest.json'), 'w') as f:
            json.dump(manifest, f, indent=2, default=str)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main application entry point

    Returns:
        0 on success, 1 on a domain error, 2 on a usage error
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    logger = setup_logger('SubDynCLI')
    try:
        with threadpool_limits(limits=RUNTIME_CONFIG['threads']):
            outputs = SubDynCLI(args, argv).run()
    except SubDynError as e:
        logger.error(f"{args.command} failed [{e.error_code}]: {e}")
        print(f"error [{e.error_code}]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(outputs, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
