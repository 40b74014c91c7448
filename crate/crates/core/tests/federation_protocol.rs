use fedcl::federation::{self, eta_global, eta_local, BatchSchedule, ClientState, RoundPlan, Server};
use fedcl::harness::experiment::{prepare, Prepared};
use fedcl::harness::{ExperimentConfig, Strategy};
use fedcl::integrator::FEASIBILITY_TOL;
use fedcl::knowledge;
use fedcl::metrics::{Phase, VecSink};
use fedcl::nn::{self, dot, ParamVector};
use fedcl::taskgen::ClientTaskData;

fn small(strategy: Strategy) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference(3, strategy);
    cfg.stream.samples_per_class = 200;
    cfg
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

/// Runs tasks `0..tasks` and returns the clients plus every task's fragment.
fn run_tasks(
    cfg: &ExperimentConfig,
    tasks: usize,
    threads: usize,
    sink: &mut VecSink,
) -> (Vec<ClientState>, Vec<federation::TaskFragment>, Server) {
    let Prepared { mut clients, data, .. } = prepare(cfg).unwrap();
    let mut server = Server::default();
    let schedule = cfg.schedule().unwrap();
    let opts = cfg.protocol_options();
    let pool = pool(threads);
    let fragments = (0..tasks)
        .map(|t| {
            federation::run_task(&mut clients, &data[t], &mut server, &cfg.plan, &schedule, &opts, t, &pool, sink)
                .unwrap()
        })
        .collect();
    (clients, fragments, server)
}

#[test]
fn running_example_uses_k_constraint_rows_on_the_fourth_task() {
    let mut cfg = small(Strategy::Fedknow);
    cfg.plan = RoundPlan { rounds_per_task: 3, local_iters: 3, finetune_epochs: 1 };
    cfg.k = 2;
    let mut sink = VecSink::default();
    let (clients, fragments, _) = run_tasks(&cfg, 4, 2, &mut sink);
    assert!(clients.iter().all(|c| c.store.len() == 4));

    let fourth: Vec<_> = fragments[3].integration.iter().filter(|e| e.phase == Phase::Local).collect();
    assert_eq!(fourth.len(), cfg.num_clients * 3 * 3);
    for e in &fourth {
        assert_eq!(e.constraint_rows, 2);
        assert_eq!(e.selected_tasks.len(), 2);
        assert!(e.selected_tasks.iter().all(|&t| t < 3));
    }
    for e in fragments[0].integration.iter().filter(|e| e.phase == Phase::Local) {
        assert_eq!(e.constraint_rows, 0);
    }
    // Fine-tune steps integrate against the single pre-aggregation gradient.
    assert!(fragments[3].integration.iter().filter(|e| e.phase == Phase::Finetune).all(|e| e.constraint_rows == 1));
    assert_eq!(sink.integration_events().count(), fragments.iter().map(|f| f.integration.len()).sum::<usize>());
}

#[test]
fn integrated_local_step_is_acute_to_every_selected_task() {
    let cfg = small(Strategy::LocalGem);
    let mut sink = VecSink::default();
    let (mut clients, _, _) = run_tasks(&cfg, 3, 1, &mut sink);
    let Prepared { data, .. } = prepare(&cfg).unwrap();
    let schedule = cfg.schedule().unwrap();
    let opts = cfg.protocol_options();
    let client = &mut clients[0];
    let d = &data[3][0];
    let batch = d.train.select(&(0..cfg.batch_size.min(d.train_len())).collect::<Vec<_>>());
    let before = client.params.clone();
    let step = federation::local_train_iteration(client, &batch, 1, &schedule, &opts).unwrap();
    assert_eq!(step.event.constraint_rows, 3);
    for &t in &step.event.selected_tasks {
        let k = client.store.get(t).unwrap();
        let restored = knowledge::restore_gradient(&client.shape, &before, k, &batch.inputs).unwrap();
        assert!(dot(&restored, &step.applied) >= -FEASIBILITY_TOL, "task {t}");
    }
    let plain = nn::grad_hard(&client.shape, &before, &batch).unwrap();
    if !step.event.projected {
        assert_eq!(step.applied, plain);
    }
    // The step is exactly params - eta_local(1) * applied.
    let mut expected = before.clone();
    expected.descend(eta_local(&schedule, 1), &step.applied);
    assert_eq!(client.params, expected);
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = small(Strategy::Fedknow);
    let mut s1 = VecSink::default();
    let mut s4 = VecSink::default();
    let (a, fa, _) = run_tasks(&cfg, 2, 1, &mut s1);
    let (b, fb, _) = run_tasks(&cfg, 2, 4, &mut s4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.params, y.params);
        assert_eq!(x.store, y.store);
    }
    assert_eq!(
        fa.iter().map(|f| &f.integration).collect::<Vec<_>>(),
        fb.iter().map(|f| &f.integration).collect::<Vec<_>>()
    );
    let strip = |s: &VecSink| s.protocol_events().map(|p| (p.task, p.round, p.client, p.bytes_up)).collect::<Vec<_>>();
    assert_eq!(strip(&s1), strip(&s4));
}

#[test]
fn local_head_is_never_uploaded() {
    let cfg = small(Strategy::Fedknow);
    let Prepared { mut clients, .. } = prepare(&cfg).unwrap();
    let c = &mut clients[0];
    let head = c.shape.head_range();
    assert_eq!(c.mask.local_indices(), head.clone().collect::<Vec<_>>().as_slice());
    let up = federation::upload(c);
    assert_eq!(up.len(), c.shape.param_count() - head.len());
    for i in head {
        c.params[i] += 1000.0;
    }
    assert_eq!(federation::upload(c), up);
    assert_eq!(c.mask.transfer_bytes(), 8 * up.len() as u64);
}

/// FedAvg with plain SGD, written directly against the parameter layout.
fn reference_fedavg(cfg: &ExperimentConfig, tasks: usize) -> Vec<ParamVector> {
    let Prepared { clients, data, .. } = prepare(cfg).unwrap();
    let shape = cfg.model.clone();
    let head = shape.head_range();
    let schedule = cfg.schedule().unwrap();
    let mut params: Vec<ParamVector> = clients.iter().map(|c| c.params.clone()).collect();
    for (t, per_client) in data.iter().enumerate().take(tasks) {
        let per_client: &Vec<ClientTaskData> = per_client;
        let total: usize = per_client.iter().map(|d| d.train.len()).sum();
        let sched = |c: usize| BatchSchedule {
            seed: cfg.seed,
            client: c,
            task: t,
            batch_size: cfg.batch_size,
            len: per_client[c].train.len(),
        };
        for round in 0..cfg.plan.rounds_per_task {
            for (c, p) in params.iter_mut().enumerate() {
                for it in 0..cfg.plan.local_iters {
                    let b = round * cfg.plan.local_iters + it;
                    let batch = per_client[c].train.select(&sched(c).local_batch(b));
                    let g = nn::grad_hard(&shape, p, &batch).unwrap();
                    let lr = eta_local(&schedule, b + 1);
                    for (w, gi) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * gi;
                    }
                }
            }
            let mut avg = vec![0.0; shape.param_count()];
            for (c, p) in params.iter().enumerate() {
                let w = per_client[c].train.len() as f64 / total as f64;
                for i in (0..shape.param_count()).filter(|i| !head.contains(i)) {
                    avg[i] += w * p[i];
                }
            }
            for (c, p) in params.iter_mut().enumerate() {
                for i in (0..shape.param_count()).filter(|i| !head.contains(i)) {
                    p[i] = avg[i];
                }
                let lr = eta_global(&schedule, round + 1);
                for idx in sched(c).finetune_batches(round, cfg.plan.finetune_epochs) {
                    let g = nn::grad_hard(&shape, p, &per_client[c].train.select(&idx)).unwrap();
                    for (w, gi) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * gi;
                    }
                }
            }
        }
    }
    params
}

#[test]
fn integration_off_equals_plain_fedavg() {
    let cfg = small(Strategy::FedavgOnly);
    let mut sink = VecSink::default();
    let (clients, fragments, server) = run_tasks(&cfg, 2, 3, &mut sink);
    let expected = reference_fedavg(&cfg, 2);
    for (c, e) in clients.iter().zip(&expected) {
        assert_eq!(c.params, *e, "client {}", c.client_id);
    }
    assert!(fragments.iter().flat_map(|f| &f.integration).all(|e| e.constraint_rows == 0 && !e.projected));
    assert_eq!(server.rounds_completed, 2 * cfg.plan.rounds_per_task);
}

#[test]
fn aggregation_installs_one_identical_global_slice() {
    // Checked mid-protocol: right after scatter, before any fine-tune step.
    let cfg = small(Strategy::Fedknow);
    let mut sink = VecSink::default();
    let (mut clients, _, server) = run_tasks(&cfg, 1, 2, &mut sink);
    let global = server.global.clone().unwrap();
    let schedule = cfg.schedule().unwrap();
    let opts = cfg.protocol_options();
    for c in clients.iter_mut() {
        let g_before = ParamVector::zeros(c.params.len());
        federation::finetune_after_aggregation(c, &global, &[], 1, &g_before, &schedule, &opts).unwrap();
        assert_eq!(federation::upload(c), global);
    }
}

#[test]
fn local_strategies_exchange_nothing() {
    for s in [Strategy::NaiveLocal, Strategy::LocalGem] {
        let cfg = small(s);
        let mut sink = VecSink::default();
        let (_, fragments, server) = run_tasks(&cfg, 2, 2, &mut sink);
        assert!(fragments.iter().all(|f| f.traffic.is_empty()));
        assert_eq!(sink.protocol_events().count(), 0);
        assert!(server.global.is_none());
        assert!(fragments.iter().flat_map(|f| &f.integration).all(|e| e.phase == Phase::Local));
    }
}

#[test]
fn mismatched_task_is_a_protocol_error() {
    let cfg = small(Strategy::Fedknow);
    let Prepared { mut clients, data, .. } = prepare(&cfg).unwrap();
    let err = federation::run_task(
        &mut clients,
        &data[1],
        &mut Server::default(),
        &cfg.plan,
        &cfg.schedule().unwrap(),
        &cfg.protocol_options(),
        1,
        &pool(1),
        &mut VecSink::default(),
    )
    .unwrap_err();
    assert!(matches!(err, fedcl::Error::Protocol(_)));
}
