// temporary debugging harness; not part of the deliverable
use nystrom3d::oracle::{legendre_all, spherical_jn, spherical_yn, MieSeries};
use nystrom3d::C64;

fn main() {
    // plane-wave expansion check: sum (2l+1) i^l j_l(kr) P_l(cos) = e^{i k r cos}
    let kappa = 1.0;
    for ct in [1.0, 0.3, -0.7] {
        let r = 1.7;
        let l_max = 30;
        let j = spherical_jn(l_max, kappa * r);
        let p = legendre_all(l_max, ct);
        let mut acc = C64::new(0.0, 0.0);
        let mut il = C64::new(1.0, 0.0);
        for l in 0..=l_max {
            acc += (2.0 * l as f64 + 1.0) * il * j[l] * p[l];
            il *= C64::new(0.0, 1.0);
        }
        let exact = C64::from_polar(1.0, kappa * r * ct);
        println!("ct={ct}: series {acc} vs exact {exact} diff {}", (acc - exact).norm());
    }
    // j against known values at x=1
    let j = spherical_jn(5, 1.0);
    println!("j0(1)={} (exact 0.8414709848078965)", j[0]);
    println!("j1(1)={} (exact 0.30116867893975674)", j[1]);
    println!("j2(1)={} (exact 0.06203505201137386)", j[2]);
    let y = spherical_yn(3, 1.0);
    println!("y0(1)={} (exact -0.5403023058681398)", y[0]);
    println!("y1(1)={} (exact -1.3817732906760363)", y[1]);
    println!("y2(1)={} (exact -3.605017566159969)", y[2]);

    let mie = MieSeries::new(1.0, [0.0, 0.0, 1.0]).unwrap();
    println!("boundary residual: {}", mie.boundary_residual(100));
    // residual at specific points
    for x in [[0.0, 0.0, 1.0 + 1e-9], [1.0 + 1e-9, 0.0, 0.0], [0.0, 0.0, -(1.0 + 1e-9)]] {
        let u = mie.scattered_field(x).unwrap() + mie.incident_field(x);
        println!("x={x:?}: total field {u} (should be ~0)");
    }
    println!(
        "scattered at (2,0,0): {}",
        mie.scattered_field([2.0, 0.0, 0.0]).unwrap()
    );
}
