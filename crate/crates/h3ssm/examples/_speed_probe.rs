use h3ssm::h3::H3Layer;
use h3ssm::optim::ParamSet;
use h3ssm::rng::{Rng, Stream};
use h3ssm::tape::Tape;
use h3ssm::tensor::Tensor;

fn main() {
    let mut rng = Rng::new(0, Stream::Bench);
    let mut ps = ParamSet::default();
    let layer = H3Layer::init(&mut ps, "h3", 32, 32, 32, false, false, &mut rng).unwrap();
    let u = Tensor::randn(&[32, 30, 32], 1.0, &mut rng);
    for _ in 0..3 {
        let mut t = Tape::new();
        let bind: Vec<_> = ps.params.iter().map(|p| t.leaf(p.tensor.clone())).collect();
        let uid = t.leaf(u.clone());
        let _ = layer.forward(&mut t, &ps, &bind, uid, None).unwrap();
        eprintln!("---");
    }
}
