use styleseg::tensor::gradcheck::check_against_finite_differences;
use styleseg::tensor::tape::{ParamStore, Tape};
use styleseg::{Padding, Rng, Tensor};

fn main() {
    // 1. instance_norm + scale_shift + sum-of-squares-ish via mul
    {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_fn(&[2, 3, 4, 4], |_| rng.normal_scaled(0.5, 1.3)));
        let run = |s: &ParamStore| -> styleseg::tensor::Result<f64> {
            let mut t = Tape::new();
            let xv = t.param(s, x);
            let u = t.instance_norm(xv, 1e-5)?;
            let w = t.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 13 % 7) as f64) * 0.2 - 0.5));
            let m = t.mul(u, w)?;
            let l = t.sum(m)?;
            Ok(t.value(l).item())
        };
        {
            let mut t = Tape::new();
            let xv = t.param(&store, x);
            let u = t.instance_norm(xv, 1e-5).unwrap();
            let w = t.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 13 % 7) as f64) * 0.2 - 0.5));
            let m = t.mul(u, w).unwrap();
            let l = t.sum(m).unwrap();
            t.backward(l, &mut store).unwrap();
        }
        let rep = check_against_finite_differences(&mut store, 1e-6, run).unwrap();
        println!("instance_norm: max rel err {:.3e}", rep.max_rel_err);
    }
    // 2. conv stride 2 + bce
    {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::from_fn(&[2, 3, 3, 3], |_| rng.normal_scaled(0.0, 0.4)));
        let b = store.register("b", Tensor::from_fn(&[2], |_| rng.normal()));
        let xim = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.normal());
        let t_ = Tensor::from_fn(&[2, 2, 4, 4], |i| (i % 2) as f64);
        let run = |s: &ParamStore| -> styleseg::tensor::Result<f64> {
            let mut t = Tape::new();
            let xv = t.constant(xim.clone());
            let wv = t.param(s, w);
            let bv = t.param(s, b);
            let c = t.conv2d(xv, wv, bv, 2, Padding::Same)?;
            let l = t.bce_with_logits(c, t_.clone())?;
            Ok(t.value(l).item())
        };
        {
            let mut t = Tape::new();
            let xv = t.constant(xim.clone());
            let wv = t.param(&store, w);
            let bv = t.param(&store, b);
            let c = t.conv2d(xv, wv, bv, 2, Padding::Same).unwrap();
            let l = t.bce_with_logits(c, t_.clone()).unwrap();
            t.backward(l, &mut store).unwrap();
        }
        let rep = check_against_finite_differences(&mut store, 1e-6, run).unwrap();
        println!("conv s2: max rel err {:.3e}", rep.max_rel_err);
    }
    // 3. conv stride2 THEN input-grad path: param -> conv(x) where x is the param
    {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_fn(&[1, 2, 8, 8], |_| rng.normal()));
        let wt = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.normal_scaled(0.0, 0.4));
        let bt = Tensor::from_fn(&[3], |_| rng.normal());
        let t_ = Tensor::from_fn(&[1, 3, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let run = |s: &ParamStore| -> styleseg::tensor::Result<f64> {
            let mut t = Tape::new();
            let xv = t.param(s, x);
            let wv = t.constant(wt.clone());
            let bv = t.constant(bt.clone());
            let c = t.conv2d(xv, wv, bv, 2, Padding::Same)?;
            let l = t.bce_with_logits(c, t_.clone())?;
            Ok(t.value(l).item())
        };
        {
            let mut t = Tape::new();
            let xv = t.param(&store, x);
            let wv = t.constant(wt.clone());
            let bv = t.constant(bt.clone());
            let c = t.conv2d(xv, wv, bv, 2, Padding::Same).unwrap();
            let l = t.bce_with_logits(c, t_.clone()).unwrap();
            t.backward(l, &mut store).unwrap();
        }
        let rep = check_against_finite_differences(&mut store, 1e-6, run).unwrap();
        println!("conv s2 input-grad: max rel err {:.3e}", rep.max_rel_err);
    }
    // 4. tconv
    {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_fn(&[1, 2, 4, 4], |_| rng.normal()));
        let w = store.register("w", Tensor::from_fn(&[2, 3, 3, 3], |_| rng.normal_scaled(0.0, 0.4)));
        let b = store.register("b", Tensor::from_fn(&[3], |_| rng.normal()));
        let t_ = Tensor::from_fn(&[1, 3, 8, 8], |i| (i % 3 == 0) as u8 as f64);
        let run = |s: &ParamStore| -> styleseg::tensor::Result<f64> {
            let mut t = Tape::new();
            let xv = t.param(s, x);
            let wv = t.param(s, w);
            let bv = t.param(s, b);
            let c = t.conv_transpose2x(xv, wv, bv)?;
            let l = t.bce_with_logits(c, t_.clone())?;
            Ok(t.value(l).item())
        };
        {
            let mut t = Tape::new();
            let xv = t.param(&store, x);
            let wv = t.param(&store, w);
            let bv = t.param(&store, b);
            let c = t.conv_transpose2x(xv, wv, bv).unwrap();
            let l = t.bce_with_logits(c, t_.clone()).unwrap();
            t.backward(l, &mut store).unwrap();
        }
        let rep = check_against_finite_differences(&mut store, 1e-6, run).unwrap();
        println!("tconv: max rel err {:.3e}", rep.max_rel_err);
    }
    // 5. leaky_relu with inputs far from 0
    {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_fn(&[40], |_| {
            let v = rng.normal();
            if v.abs() < 0.1 { v + 0.2 } else { v }
        }));
        let run = |s: &ParamStore| -> styleseg::tensor::Result<f64> {
            let mut t = Tape::new();
            let xv = t.param(s, x);
            let r = t.leaky_relu(xv, 0.01)?;
            let l = t.sum(r)?;
            Ok(t.value(l).item())
        };
        {
            let mut t = Tape::new();
            let xv = t.param(&store, x);
            let r = t.leaky_relu(xv, 0.01).unwrap();
            let l = t.sum(r).unwrap();
            t.backward(l, &mut store).unwrap();
        }
        let rep = check_against_finite_differences(&mut store, 1e-6, run).unwrap();
        println!("leaky: max rel err {:.3e}", rep.max_rel_err);
    }
}
