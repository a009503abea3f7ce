//! Central finite-difference checks for every differentiable op, twenty
//! seeds each. Large parameter stores are checked at scattered coordinates.
//! Each check appends `(op, worst relative error)` rows.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osc_core::ckm::{CkmNet, CkmNetConfig, EncodeInput, UpdateInput, CKM_DIM};
use osc_core::gap::{magnitude_grad, GapNet, GapNetConfig, GapVariant, GAP_DIM};
use osc_core::nn::encoder::EncoderBlock;
use osc_core::nn::gradcheck::{
    numeric_input_grad, numeric_param_grad, numeric_param_grad_at, rel_err, rel_err_at,
    spread_coords,
};
use osc_core::nn::tensor::l2_norm;
use osc_core::nn::{GruCell, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tensor2};
use osc_core::policy::{
    ActionMask, CommAction, CriticMode, CriticNet, Objective, PolicyNet, PolicyNetConfig,
    PolicyOutput, PolicyState, Style,
};
use osc_core::text::{
    AgentId, DialogueHistory, ProfileMask, Query, TaskKind, Utterance, EMBED_DIM,
};

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;

pub type Rows = Vec<(String, f64)>;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
    Tensor2::from_vec(r, c, rand_vec(rng, r * c, 1.0)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn report(out: &mut Rows, name: &str, worst: f64) {
    out.push((name.to_string(), worst));
}

pub fn dense(out: &mut Rows) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "d", 5, 4, &mut rng);
        let x = rand_t(&mut rng, 3, 5);
        let probe = rand_t(&mut rng, 3, 4);
        let f = |ps: &ParamStore, x: &Tensor2| dot(lin.forward(ps, x).data(), probe.data());
        let mut g = ps.zero_grads();
        let dx = lin.backward(&ps, &x, &probe, &mut g);
        let nx = numeric_input_grad(x.data(), |v| {
            f(&ps, &Tensor2::from_vec(3, 5, v.to_vec()).unwrap())
        });
        let np = numeric_param_grad(&mut ps, |p| f(p, &x));
        worst = worst
            .max(rel_err(dx.data(), &nx))
            .max(rel_err(&g.flatten(), &np));
    }
    report(out, "dense", worst);
}

pub fn layer_norm(out: &mut Rows) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6);
        for id in ps.ids().collect::<Vec<_>>() {
            let n = ps.value(id).data().len();
            ps.value_mut(id)
                .data_mut()
                .copy_from_slice(&rand_vec(&mut rng, n, 1.0));
        }
        let x = rand_t(&mut rng, 3, 6);
        let probe = rand_t(&mut rng, 3, 6);
        let f = |ps: &ParamStore, x: &Tensor2| dot(ln.forward(ps, x).0.data(), probe.data());
        let (_, cache) = ln.forward(&ps, &x);
        let mut g = ps.zero_grads();
        let dx = ln.backward(&ps, &cache, &probe, &mut g);
        let nx = numeric_input_grad(x.data(), |v| {
            f(&ps, &Tensor2::from_vec(3, 6, v.to_vec()).unwrap())
        });
        let np = numeric_param_grad(&mut ps, |p| f(p, &x));
        worst = worst
            .max(rel_err(dx.data(), &nx))
            .max(rel_err(&g.flatten(), &np));
    }
    report(out, "layer norm", worst);
}

pub fn attention(out: &mut Rows) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let att = MultiHeadAttention::new(&mut ps, "a", 8, 2, &mut rng).unwrap();
        let q = rand_t(&mut rng, 3, 8);
        let kv = rand_t(&mut rng, 4, 8);
        let probe = rand_t(&mut rng, 3, 8);
        let f = |ps: &ParamStore, q: &Tensor2, kv: &Tensor2| {
            dot(att.forward(ps, q, kv).unwrap().0.data(), probe.data())
        };
        let (_, cache) = att.forward(&ps, &q, &kv).unwrap();
        let mut g = ps.zero_grads();
        let (dq, dkv) = att.backward(&ps, &cache, &probe, &mut g);
        let nq = numeric_input_grad(q.data(), |v| {
            f(&ps, &Tensor2::from_vec(3, 8, v.to_vec()).unwrap(), &kv)
        });
        let nkv = numeric_input_grad(kv.data(), |v| {
            f(&ps, &q, &Tensor2::from_vec(4, 8, v.to_vec()).unwrap())
        });
        let np = numeric_param_grad(&mut ps, |p| f(p, &q, &kv));
        worst = worst
            .max(rel_err(dq.data(), &nq))
            .max(rel_err(dkv.data(), &nkv))
            .max(rel_err(&g.flatten(), &np));
    }
    report(out, "attention", worst);
}

pub fn encoder_block(out: &mut Rows) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let blk = EncoderBlock::new(&mut ps, "b", 8, 2, 12, &mut rng).unwrap();
        let x = rand_t(&mut rng, 4, 8);
        let probe = rand_t(&mut rng, 4, 8);
        let f =
            |ps: &ParamStore, x: &Tensor2| dot(blk.forward(ps, x).unwrap().0.data(), probe.data());
        let (_, cache) = blk.forward(&ps, &x).unwrap();
        let mut g = ps.zero_grads();
        let dx = blk.backward(&ps, &cache, &probe, &mut g);
        let nx = numeric_input_grad(x.data(), |v| {
            f(&ps, &Tensor2::from_vec(4, 8, v.to_vec()).unwrap())
        });
        let np = numeric_param_grad(&mut ps, |p| f(p, &x));
        worst = worst
            .max(rel_err(dx.data(), &nx))
            .max(rel_err(&g.flatten(), &np));
    }
    report(out, "encoder block", worst);
}

pub fn gated_recurrent_cell(out: &mut Rows) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let cell = GruCell::new(&mut ps, "g", 5, 6, &mut rng);
        let h = rand_vec(&mut rng, 6, 1.0);
        let x = rand_vec(&mut rng, 5, 1.0);
        let probe = rand_vec(&mut rng, 6, 1.0);
        let f =
            |ps: &ParamStore, h: &[f64], x: &[f64]| dot(&cell.forward(ps, h, x).unwrap().0, &probe);
        let (_, cache) = cell.forward(&ps, &h, &x).unwrap();
        let mut g = ps.zero_grads();
        let (dh, dx) = cell.backward(&ps, &cache, &probe, &mut g);
        let nh = numeric_input_grad(&h, |v| f(&ps, v, &x));
        let nx = numeric_input_grad(&x, |v| f(&ps, &h, v));
        let np = numeric_param_grad(&mut ps, |p| f(p, &h, &x));
        worst = worst
            .max(rel_err(&dh, &nh))
            .max(rel_err(&dx, &nx))
            .max(rel_err(&g.flatten(), &np));
    }
    report(out, "gated recurrent cell", worst);
}

pub fn gap_network_all_variants(out: &mut Rows) {
    let cfg = GapNetConfig {
        proj_dim: 64,
        facets: 4,
        heads: 2,
        hidden: 8,
        out_dim: GAP_DIM,
    };
    for variant in [
        GapVariant::Learned,
        GapVariant::Difference,
        GapVariant::L2,
        GapVariant::Mlp,
    ] {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (net, mut ps) = GapNet::new(cfg.clone(), variant, &mut rng).unwrap();
            let phi = rand_vec(&mut rng, EMBED_DIM, 0.3);
            let z = rand_vec(&mut rng, CKM_DIM, 1.0);
            let mag =
                |ps: &ParamStore, p: &[f64], q: &[f64]| l2_norm(&net.forward(ps, p, q).unwrap().0);
            let (g0, cache) = net.forward(&ps, &phi, &z).unwrap();
            let mut g = ps.zero_grads();
            let (dphi, dz) = net.backward(&ps, &cache, &magnitude_grad(&g0), &mut g);
            let nphi = numeric_input_grad(&phi, |p| mag(&ps, p, &z));
            let nz = numeric_input_grad(&z, |q| mag(&ps, &phi, q));
            let coords = spread_coords(&ps, 6);
            let np = numeric_param_grad_at(&mut ps, &coords, |p| mag(p, &phi, &z));
            worst = worst
                .max(rel_err(&dphi, &nphi))
                .max(rel_err(&dz, &nz))
                .max(rel_err_at(&g.flatten(), &coords, &np));
        }
        report(out, &format!("gap {variant:?}"), worst);
    }
}

fn policy_cfg(critic: CriticMode) -> PolicyNetConfig {
    PolicyNetConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        ff_dim: 12,
        critic,
        detach_critic: false,
    }
}

fn state(rng: &mut ChaCha8Rng, k: usize) -> PolicyState {
    PolicyState {
        phi: rand_vec(rng, EMBED_DIM, 0.2),
        query: rand_vec(rng, EMBED_DIM, 0.2),
        history: rand_vec(rng, EMBED_DIM, 0.2),
        collaborators: (1..k).map(AgentId).collect(),
        ckm_block: (1..k).map(|_| rand_vec(rng, CKM_DIM, 1.0)).collect(),
        gap_block: (1..k).map(|_| rand_vec(rng, GAP_DIM, 1.0)).collect(),
    }
}

fn action(rng: &mut ChaCha8Rng, k: usize) -> CommAction {
    let ti = rng.random_range(0..k - 1);
    CommAction {
        objective: Objective::ALL[rng.random_range(0..Objective::ALL.len())],
        target: AgentId(ti + 1),
        target_index: ti,
        style: Style {
            detail: rng.random_range(0.1..0.9),
            assertiveness: rng.random_range(0.1..0.9),
        },
        log_prob: 0.0,
        entropy: 0.0,
    }
}

pub fn policy_heads(out: &mut Rows) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = rand_vec(&mut rng, 10, 2.0);
        let tgt = rand_vec(&mut rng, 4, 2.0);
        let style: Vec<f64> = rand_vec(&mut rng, 4, 2.0);
        let a = action(&mut rng, 5);
        let mask = ActionMask::default();
        let f = |o: &[f64], t: &[f64], s: &[f64]| {
            let out =
                PolicyOutput::from_parts(o.to_vec(), t.to_vec(), [s[0], s[1], s[2], s[3]], 0.0);
            0.7 * out.log_prob(&a, mask) - 0.3 * out.entropy(mask)
        };
        let out = PolicyOutput::from_parts(
            obj.clone(),
            tgt.clone(),
            [style[0], style[1], style[2], style[3]],
            0.0,
        );
        let hg = out.head_grads(&a, mask, 0.7, -0.3);
        let no = numeric_input_grad(&obj, |v| f(v, &tgt, &style));
        let nt = numeric_input_grad(&tgt, |v| f(&obj, v, &style));
        let ns = numeric_input_grad(&style, |v| f(&obj, &tgt, v));
        worst = worst
            .max(rel_err(&hg.dobjective, &no))
            .max(rel_err(&hg.dtarget, &nt))
            .max(rel_err(&hg.dstyle_raw, &ns));
    }
    report(out, "policy heads", worst);
}

pub fn policy_trunk_critic_and_state_projections(out: &mut Rows) {
    for mode in [CriticMode::Shared, CriticMode::Separate] {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = policy_cfg(mode);
            let (net, mut ps) = PolicyNet::new(cfg.clone(), &mut rng).unwrap();
            let (critic, mut cps) = CriticNet::new(&cfg, &mut rng).unwrap();
            let k = 3 + (seed as usize % 3);
            let st = state(&mut rng, k);
            let a = action(&mut rng, k);
            let mask = ActionMask::default();
            let loss = |ps: &ParamStore, cps: &ParamStore, st: &PolicyState| {
                let (out, c) = net.forward(ps, st).unwrap();
                let (v, _) = critic.forward(cps, st, c.pooled()).unwrap();
                0.7 * out.log_prob(&a, mask) - 0.3 * out.entropy(mask) + 0.5 * v * v
            };
            let (out, c) = net.forward(&ps, &st).unwrap();
            let (v, cc) = critic.forward(&cps, &st, c.pooled()).unwrap();
            let mut g = ps.zero_grads();
            let mut cg = cps.zero_grads();
            let (dpool, csg) = critic.backward(&cps, &cc, v, &mut cg);
            let mut sg = net.backward(
                &ps,
                &c,
                &out.head_grads(&a, mask, 0.7, -0.3),
                dpool.as_deref(),
                &mut g,
            );
            if let Some(s) = csg {
                sg.add(&s);
            }
            let coords = spread_coords(&ps, 5);
            let cps0 = cps.clone();
            let np = numeric_param_grad_at(&mut ps, &coords, |p| loss(p, &cps0, &st));
            worst = worst.max(rel_err_at(&g.flatten(), &coords, &np));
            let ccoords = spread_coords(&cps, 5);
            let ps0 = ps.clone();
            let ncp = numeric_param_grad_at(&mut cps, &ccoords, |p| loss(&ps0, p, &st));
            worst = worst.max(rel_err_at(&cg.flatten(), &ccoords, &ncp));
            let l = seed as usize % (k - 1);
            let nz = numeric_input_grad(&st.ckm_block[l], |z| {
                let mut s = st.clone();
                s.ckm_block[l] = z.to_vec();
                loss(&ps, &cps, &s)
            });
            let ng = numeric_input_grad(&st.gap_block[l], |gv| {
                let mut s = st.clone();
                s.gap_block[l] = gv.to_vec();
                loss(&ps, &cps, &s)
            });
            worst = worst
                .max(rel_err(&sg.dz[l], &nz))
                .max(rel_err(&sg.dg[l], &ng));
        }
        report(out, &format!("policy + critic {mode:?}"), worst);
    }
}

fn dialogue(rng: &mut ChaCha8Rng) -> (Query, DialogueHistory) {
    let q = Query::new(
        "what is the total of the hidden values?",
        TaskKind::HiddenSum,
    );
    let words = [
        "i", "hold", "3", "because", "maybe", "agreed", "add", "them", "data", "shows", "?",
        "agent1=4",
    ];
    let mut h = DialogueHistory::new();
    for t in 0..4 {
        let n = rng.random_range(3..8);
        let text: Vec<&str> = (0..n)
            .map(|_| words[rng.random_range(0..words.len())])
            .collect();
        h.push(Utterance::new(
            AgentId(t % 2),
            t / 2 + 1,
            text.join(" "),
            None,
        ))
        .unwrap();
    }
    (q, h)
}

pub fn ckm_encoder_and_update_projections(out: &mut Rows) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, mut ps) = CkmNet::new(
            CkmNetConfig {
                enc_layers: 1,
                ff_dim: 32,
                ..CkmNetConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let (q, h) = dialogue(&mut rng);
        let probe = rand_vec(&mut rng, CKM_DIM, 1.0);

        let enc = EncodeInput::build(AgentId(1), &q, &h, 5, ProfileMask::Full);
        let (_, ec) = net.encode(&ps, &enc).unwrap();
        let mut g = ps.zero_grads();
        net.encode_backward(&ps, &ec, &probe, &mut g);
        let coords = spread_coords(&ps, 3);
        let n = numeric_param_grad_at(&mut ps, &coords, |p| {
            dot(&net.encode(p, &enc).unwrap().0, &probe)
        });
        worst = worst.max(rel_err_at(&g.flatten(), &coords, &n));

        let prev = rand_vec(&mut rng, CKM_DIM, 0.5);
        let msg = Utterance::new(AgentId(1), 3, "i hold 3 because data", None);
        let up = UpdateInput::build(&prev, &msg, &q, &h, 5, ProfileMask::Full);
        let (_, uc) = net.update(&ps, &up).unwrap();
        let mut g = ps.zero_grads();
        let dprev = net.update_backward(&ps, &uc, &probe, &mut g);
        let n = numeric_param_grad_at(&mut ps, &coords, |p| {
            dot(&net.update(p, &up).unwrap().0, &probe)
        });
        worst = worst.max(rel_err_at(&g.flatten(), &coords, &n));
        let nprev = numeric_input_grad(&prev, |p| {
            let inp = UpdateInput {
                prev_z: p.to_vec(),
                features: up.features.clone(),
            };
            dot(&net.update(&ps, &inp).unwrap().0, &probe)
        });
        worst = worst.max(rel_err(&dprev, &nprev));
    }
    report(out, "ckm encoder + update", worst);
}

pub const ALL: [fn(&mut Rows); 9] = [
    dense,
    layer_norm,
    attention,
    encoder_block,
    gated_recurrent_cell,
    gap_network_all_variants,
    policy_heads,
    policy_trunk_critic_and_state_projections,
    ckm_encoder_and_update_projections,
];
