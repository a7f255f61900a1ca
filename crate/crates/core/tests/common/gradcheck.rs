//! Central finite-difference gradient checks in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtd_core::data::SequenceRecord;
use rtd_core::discriminator::{rtd_loss, DiscInput, Discriminator, DiscriminatorConfig};
use rtd_core::encoder::{attention_mask, EncoderDims, Embeddings};
use rtd_core::generator::{build_discriminator_input, mlm_loss, Generator, GeneratorConfig};
use rtd_core::masking::{apply_mlm_mask, MaskConfig, MaskRatios};
use rtd_core::numerics::{Init, Initializer, ParamId, ParamStore, Tape, Tensor, Var};

const EPS: f64 = 1e-3;
const RTOL: f64 = 1e-2;
const MAX_CHECKS: usize = 200;

type LossFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var + 'a;

fn eval(f: &LossFn, store: &ParamStore<f64>) -> f64 {
    let mut tape = Tape::new();
    let l = f(&mut tape, store);
    tape.value(l)[0]
}

/// Compares analytic gradients with central differences on up to
/// `MAX_CHECKS` entries spread over all parameters. Returns the number of
/// entries checked, or the first mismatch.
pub fn check(store: &mut ParamStore<f64>, f: &LossFn) -> Result<usize, String> {
    let mut tape = Tape::new();
    let l = f(&mut tape, store);
    let grads = tape.backward(l).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let total: usize = ids.iter().map(|id| store.get(*id).numel()).sum();
    let stride = total.div_ceil(MAX_CHECKS).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    let mut offset = 0usize;
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let start = (stride - offset % stride) % stride;
        let mut i = start + rng.gen_range(0..stride).min(n.saturating_sub(start + 1));
        while i < n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + EPS;
            let up = eval(f, store);
            store.get_mut(id).data_mut()[i] = orig - EPS;
            let down = eval(f, store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if !(rel <= RTOL) {
                return Err(format!(
                    "{}[{i}]: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})",
                    store.name(id)
                ));
            }
            checked += 1;
            i += stride;
        }
        offset += n;
    }
    Ok(checked)
}

fn random(store: &mut ParamStore<f64>, name: &str, shape: &[usize], seed: u64) -> ParamId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.add(name, Tensor::new(shape, data).unwrap()).unwrap()
}

/// `sum(y * w)` with a fixed random `w`, so every output entry matters.
fn project(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w).unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

fn unary(shape: &[usize], op: impl Fn(&mut Tape<f64>, Var) -> Var) -> Result<usize, String> {
    let mut store = ParamStore::new();
    let a = random(&mut store, "a", shape, 1);
    let f = move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let x = t.param(s, a).unwrap();
        let y = op(t, x);
        project(t, y)
    };
    check(&mut store, &f)
}

fn binary(sa: &[usize], sb: &[usize], op: impl Fn(&mut Tape<f64>, Var, Var) -> Var) -> Result<usize, String> {
    let mut store = ParamStore::new();
    let a = random(&mut store, "a", sa, 1);
    let b = random(&mut store, "b", sb, 2);
    let f = move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let x = t.param(s, a).unwrap();
        let y = t.param(s, b).unwrap();
        let z = op(t, x, y);
        project(t, z)
    };
    check(&mut store, &f)
}


fn layer_norm_case() -> Result<usize, String> {
    let mut store = ParamStore::new();
    let x = random(&mut store, "x", &[4, 6], 1);
    let g = random(&mut store, "g", &[6], 2);
    let b = random(&mut store, "b", &[6], 3);
    let f = move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let (xv, gv, bv) = (t.param(s, x).unwrap(), t.param(s, g).unwrap(), t.param(s, b).unwrap());
        let y = t.layer_norm(xv, gv, bv, 1e-5).unwrap();
        project(t, y)
    };
    check(&mut store, &f)
}

fn attention_case() -> Result<usize, String> {
    // scores -> mask -> softmax -> context, wired as in an encoder layer
    let mut store = ParamStore::new();
    let q = random(&mut store, "q", &[2, 4, 6], 1);
    let k = random(&mut store, "k", &[2, 4, 6], 2);
    let v = random(&mut store, "v", &[2, 4, 6], 3);
    let f = move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let heads = 2;
        let mut split = |id| {
            let x = t.param(s, id).unwrap();
            t.split_heads(x, heads).unwrap()
        };
        let (qs, ks, vs) = (split(q), split(k), split(v));
        let sc = t.bmm_nt(qs, ks).unwrap();
        let sc = t.scale(sc, 1.0 / 3f64.sqrt()).unwrap();
        let mask = t.constant(attention_mask(&[4, 3], 4, heads)).unwrap();
        let sc = t.add(sc, mask).unwrap();
        let p = t.softmax(sc).unwrap();
        let ctx = t.bmm(p, vs).unwrap();
        let ctx = t.merge_heads(ctx, heads).unwrap();
        project(t, ctx)
    };
    check(&mut store, &f)
}

fn bce_case() -> Result<usize, String> {
    unary(&[2, 5], |t, a| {
        let s = t.scale(a, 3.0).unwrap();
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let weights = [1.0, 1.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let l = t.bce_with_logits(s, &labels, &weights).unwrap();
        t.reshape(l, &[1]).unwrap()
    })
}

fn positive_log(t: &mut Tape<f64>, a: Var) -> Var {
    let sq = t.mul(a, a).unwrap();
    let c = t.constant(Tensor::filled(t.shape(a), 0.5)).unwrap();
    let pos = t.add(sq, c).unwrap();
    t.log(pos).unwrap()
}

pub type Case = (&'static str, fn() -> Result<usize, String>);

/// One case per registered tape op (plus the attention composition).
pub fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", || binary(&[3, 4], &[4, 5], |t, a, b| t.matmul(a, b).unwrap())),
        ("matmul (batched lhs)", || binary(&[2, 3, 4], &[4, 5], |t, a, b| t.matmul(a, b).unwrap())),
        ("matmul_nt", || binary(&[3, 4], &[5, 4], |t, a, b| t.matmul_nt(a, b).unwrap())),
        ("bmm", || binary(&[2, 3, 4], &[2, 4, 5], |t, a, b| t.bmm(a, b).unwrap())),
        ("bmm_nt", || binary(&[2, 3, 4], &[2, 5, 4], |t, a, b| t.bmm_nt(a, b).unwrap())),
        ("add", || binary(&[3, 4], &[3, 4], |t, a, b| t.add(a, b).unwrap())),
        ("add (broadcast)", || binary(&[2, 3, 4], &[3, 4], |t, a, b| t.add(a, b).unwrap())),
        ("sub (broadcast)", || binary(&[2, 3, 4], &[4], |t, a, b| t.sub(a, b).unwrap())),
        ("mul", || binary(&[3, 4], &[3, 4], |t, a, b| t.mul(a, b).unwrap())),
        ("mul (broadcast)", || binary(&[2, 3, 4], &[4], |t, a, b| t.mul(a, b).unwrap())),
        ("scale", || unary(&[3, 4], |t, a| t.scale(a, -2.5).unwrap())),
        ("gelu", || unary(&[3, 4], |t, a| t.gelu(a).unwrap())),
        ("tanh", || unary(&[3, 4], |t, a| t.tanh(a).unwrap())),
        ("sigmoid", || unary(&[3, 4], |t, a| t.sigmoid(a).unwrap())),
        ("log", || unary(&[3, 4], positive_log)),
        ("softmax", || unary(&[3, 5], |t, a| t.softmax(a).unwrap())),
        ("log_softmax", || unary(&[3, 5], |t, a| t.log_softmax(a).unwrap())),
        ("layer_norm", layer_norm_case),
        ("embedding", || unary(&[6, 3], |t, a| t.embedding(a, &[0, 2, 2, 5], &[2, 2]).unwrap())),
        ("gather_rows", || unary(&[5, 3], |t, a| t.gather_rows(a, &[4, 0, 4]).unwrap())),
        ("pick", || unary(&[3, 4], |t, a| t.pick(a, &[1, 3, 0]).unwrap())),
        ("concat", || binary(&[3, 2], &[3, 4], |t, a, b| t.concat(&[a, b]).unwrap())),
        ("sum", || unary(&[3, 4], |t, a| t.sum(a).unwrap())),
        ("mean", || unary(&[3, 4], |t, a| t.mean(a).unwrap())),
        ("reshape", || unary(&[3, 4], |t, a| t.reshape(a, &[2, 6]).unwrap())),
        ("split_heads", || unary(&[2, 3, 4], |t, a| t.split_heads(a, 2).unwrap())),
        ("merge_heads", || unary(&[4, 3, 2], |t, a| t.merge_heads(a, 2).unwrap())),
        ("bce_with_logits", bce_case),
        ("attention", attention_case),
    ]
}

fn toy_records(rng: &mut ChaCha8Rng, batch: usize, seq: usize, vocab: u32) -> Vec<SequenceRecord> {
    (0..batch)
        .map(|b| {
            let len = seq - b % 3;
            let mut ids = vec![2];
            ids.extend((0..len - 2).map(|_| rng.gen_range(5..vocab)));
            ids.push(3);
            ids.resize(seq, 0);
            SequenceRecord {
                token_ids: ids,
                true_length: len,
            }
        })
        .collect()
}

/// Generator MLM loss plus weighted discriminator losses at hidden 16,
/// 2 layers, vocabulary 50. With `share`, the discriminator reuses the
/// generator trunk and every section head enters the loss.
pub fn full_loss(share: bool, n_sections: usize) -> Result<usize, String> {
    let vocab = 50;
    let (batch, seq) = (3, 8);
    let dims = EncoderDims {
        hidden: 16,
        heads: 2,
        ffn: 32,
    };
    let init = Initializer::new(5);
    let mut store = ParamStore::<f64>::new();
    let embed = Embeddings::new(&mut store, &init, vocab, seq, dims.hidden).unwrap();
    let gcfg = GeneratorConfig {
        n_layers: 2,
        exit_layers: vec![1, 2],
        exit_loss_weights: vec![0.4, 0.6],
        concat_exit_heads: true,
        skip_above_exit: false,
    };
    let gen = Generator::new(&mut store, &init, gcfg, dims, embed, vocab).unwrap();
    let dcfg = DiscriminatorConfig {
        n_layers: 2,
        n_sections,
        early_exit: n_sections > 1,
        share_params_with_gen: share,
    };
    let disc = Discriminator::new(&mut store, &init, dcfg, dims, embed, share.then(|| gen.layers())).unwrap();
    // non-trivial values everywhere, including biases and norm parameters
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = format!("{}#check", store.name(id));
        let shape = store.get(id).shape().to_vec();
        let mut t: Tensor<f64> = init.tensor(&name, &shape, Init::Normal(0.3));
        if name.contains("gamma") {
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
        *store.get_mut(id) = t;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let records = toy_records(&mut rng, batch, seq, vocab as u32);
    let cfg = MaskConfig {
        mask_fraction: 0.3,
        ratios: MaskRatios::BERT,
    };
    let masked = apply_mlm_mask(&records, &mut rng, &cfg, vocab).unwrap();
    let sampled: Vec<u32> = (0..masked.n_selected()).map(|_| rng.gen_range(5..vocab as u32)).collect();
    let targets = build_discriminator_input(&masked, &sampled);
    let labels: Vec<usize> = masked.selected_originals().iter().map(|&i| i as usize).collect();
    let rows = masked.selected_flat();

    let f = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let pass = gen.forward(t, s, &masked, None).unwrap();
        let logits: Vec<Var> = (0..2).map(|e| gen.exit_logits(t, s, &pass, e, &rows).unwrap()).collect();
        let mut total = mlm_loss(t, &logits, &labels, &[0.4, 0.6]).unwrap().total;
        let dp = disc
            .forward(t, s, DiscInput::Ids(&targets.ids), &masked.true_lengths, batch, seq, None)
            .unwrap();
        for sec in 1..=n_sections {
            let z = disc.section_logits(t, s, &dp, sec).unwrap();
            let l = rtd_loss(t, z, &targets).unwrap();
            let l = t.scale(l, 5.0).unwrap();
            total = t.add(total, l).unwrap();
        }
        total
    };
    let checked = check(&mut store, &f)?;
    if checked < 100 {
        return Err(format!("only {checked} entries checked"));
    }
    Ok(checked)
}
