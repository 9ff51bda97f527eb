// Prints the closed-form effective channel of the two-tap example for every frame type.
#include "otfs/otfs.hpp"

#include <iostream>

int main() {
    using namespace otfs;
    ChannelModel model;
    model.taps = {{cx(1.0), 0, 0.0}, {cx(0.5), 1, 1.0}};

    for (auto kind : {FrameKind::RCP, FrameKind::RZP, FrameKind::FCP, FrameKind::FZS, FrameKind::RFCP}) {
        const FrameConfig cfg = kind == FrameKind::FZS ? make_config(kind, 2, 2, 0, 1) : make_config(kind, 2, 2, 1);
        ChannelModel m = model;
        m.grid = native_grid(cfg);
        const EffectiveChannel H = heff_closed_form(m, cfg);
        std::cout << "# " << to_string(kind) << " (" << H.matrix.rows() << " x " << H.matrix.cols() << ")\n";
        write_triples_csv(std::cout, H);
    }
}
