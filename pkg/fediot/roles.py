"""
roles.py

Exposes the ``broker``, ``server`` and ``client`` commands, one process per
role, for federated runs over TCP. Start the broker first, then the server,
then the clients in any order::

    $ python -m fediot broker --broker-addr 127.0.0.1:1883
    $ python -m fediot server --dataset synthetic --run-id demo
    $ python -m fediot client --index 0 --run-id demo
    $ python -m fediot client --index 1 --run-id demo

All processes exit with 0 once the server has sent ``DONE``.

"""

import logging
from os import path

import click

from .decorators import experiment_options, with_experiment_config, reports_errors
from .experiment import load_prepared, dataset_info, fl_report, resolve_run_id
from .models.data_model import build_global_testset
from .models.exception import ConfigError
from .models.federation_model import ServerManager, ClientManager
from .models.report_model import save_model, model_file_name
from .models.transport_model import Broker, TcpBackend, TcpTransport

logger = logging.getLogger(__name__)

def _tcp_transport(config):
    host, port = config.broker_host_port()
    return TcpTransport(host, port)

@click.command("broker")
@experiment_options
@click.option("--exit-when-idle", is_flag=True,
              help="Stop once a run has finished and every connection has closed")
@reports_errors
@with_experiment_config
def broker(config, exit_when_idle):
    """Route messages between the server and its clients."""
    host, port = config.broker_host_port()
    running = Broker(host, port, exit_when_idle=exit_when_idle).start()
    try:
        running.serve_forever()
    except KeyboardInterrupt:
        logger.info("Broker interrupted")
    finally:
        running.stop()

@click.command("server")
@experiment_options
@click.option("--clients", default=None,
              help="Comma separated client ids to wait for (default: any)")
@reports_errors
@with_experiment_config
def server(config, clients):
    """Coordinate a federated run and write its report."""
    config = config.with_overrides(mode="fl", transport="tcp")
    config = config.with_overrides(run_id=resolve_run_id(config))
    cache, datasets = load_prepared(config)
    expected = [c for c in clients.split(",") if c] if clients else None
    if expected is not None and len(expected) != len(datasets):
        raise ConfigError("{} client ids for {} devices".format(len(expected), len(datasets)))

    transport = _tcp_transport(config)
    manager = ServerManager(
        transport.endpoint("server"), config.federation_config(len(datasets)),
        config.autoencoder_config(datasets[0].train.shape[1]),
        device_ids=[d.device_id for d in datasets], run_id=config.run_id, seed=config.seed,
        eval_sets=[d.eval for d in datasets], test_set=build_global_testset(datasets),
        expected_clients=expected, registration_timeout=config.registration_timeout,
        round_timeout=config.round_timeout,
    )
    try:
        transport.drive(manager)
    finally:
        manager.backend.close()

    out_dir = path.join(config.output_dir, config.run_id)
    save_model(manager.global_model, path.join(out_dir, model_file_name()))
    report = fl_report(config, manager.result(), dataset_info(config, cache, datasets))
    report.write(out_dir)
    click.echo(report.metrics_line())

@click.command("client")
@experiment_options
@click.option("--index", type=click.INT, default=0, show_default=True,
              help="Client number; the client id is client-<index>")
@click.option("--client-id", default=None, help="Explicit client id, overrides --index")
@reports_errors
@with_experiment_config
def client(config, index, client_id):
    """Train on the device the server assigns."""
    config = config.with_overrides(mode="fl", transport="tcp")
    config = config.with_overrides(run_id=resolve_run_id(config))
    client_id = client_id or "client-{}".format(index)
    cache, _ = load_prepared(config)
    host, port = config.broker_host_port()
    manager = ClientManager(
        TcpBackend(client_id, host, port), client_id,
        lambda device_id: cache.load_device(device_id)[0], run_id=config.run_id,
        round_timeout=config.round_timeout,
    )
    try:
        TcpTransport(host, port).drive(manager)
    finally:
        manager.backend.close()
    click.echo("{} finished, threshold {}".format(client_id, manager.threshold.tr))

commands = [broker, server, client]
