// scratch: debug the split OCP through both engines
use rdmpc::dmpc::{assemble_microgrid_split_ocp, build_tree, Contract, OcpOptions, TreeOptions};
use rdmpc::microgrid::{subsystem_model, table_params, PriceSchedule, Topology, IDX_S};
use rdmpc::solver::al::{solve_al, AlOptions, NlpAsProgram};
use rdmpc::solver::{solve, SolveOptions};

fn main() {
    let params = table_params(0);
    let topo = Topology::fully_connected(2);
    let model = subsystem_model(0, &params, &topo, 0.25);
    let schedule = PriceSchedule::benchmark();
    let corridor = Contract::degenerate(1, 0, &[0.0], 8, 0.25);
    let mut x0 = vec![0.0; 4];
    x0[IDX_S] = 0.5;
    let tree = build_tree(&x0, 60, &[vec![0.0; 3]], &[&corridor], &[vec![]], &TreeOptions::new(4, 1)).unwrap();
    let offsets = topo.inbound_offsets(0);
    let mut opts = OcpOptions::new(0.25, model.n_x);
    opts.state_margin[IDX_S] = 1e-3;
    let (nlp, layout) = assemble_microgrid_split_ocp(&tree, &model, &params, &schedule, &offsets, &opts).unwrap();
    let v0 = vec![0.0; layout.n_vars];
    let r = solve(&nlp, &v0, &SolveOptions::default());
    println!("SQP: status {:?} obj {} viol {} iters {}", r.status, r.objective, r.max_violation, r.iterations);
    println!("SQP u: {:?}", &r.solution[..16]);
    let prog = NlpAsProgram { problem: &nlp };
    let al = solve_al(&prog, &v0, None, &AlOptions { max_outer: 60, inner_iters: 600, ..Default::default() });
    println!("AL: status {:?} obj {} viol {}", al.status, al.objective, al.max_violation);
    println!("AL u: {:?}", &al.x[..16]);
}
