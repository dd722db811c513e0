#include "speckle/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <stdexcept>

namespace speckle {

namespace {

// Plan cache keyed by (n, sign). Plans are created once with
// FFTW_ESTIMATE (deterministic algorithm choice) and FFTW_UNALIGNED so
// they can execute on any caller buffer. fftw_execute_dft on distinct
// buffers is thread safe; plan creation is not, hence the mutex.
class PlanCache {
public:
    fftw_plan get(int n, int sign) {
        std::scoped_lock lock(mu_);
        auto key = std::make_pair(n, sign);
        auto it = plans_.find(key);
        if (it != plans_.end()) return it->second;
        // Planned out-of-place; execution must stay out-of-place too.
        fftw_complex* bin = fftw_alloc_complex(static_cast<std::size_t>(n) * n);
        fftw_complex* bout = fftw_alloc_complex(static_cast<std::size_t>(n) * n);
        if (bin == nullptr || bout == nullptr) {
            fftw_free(bin);
            fftw_free(bout);
            throw std::bad_alloc();
        }
        fftw_plan p = fftw_plan_dft_2d(n, n, bin, bout, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
        fftw_free(bin);
        fftw_free(bout);
        if (p == nullptr) throw std::runtime_error("fftw plan creation failed");
        plans_.emplace(key, p);
        return p;
    }

private:
    std::mutex mu_;
    std::map<std::pair<int, int>, fftw_plan> plans_;
};

PlanCache& cache() {
    static PlanCache c;
    return c;
}

std::vector<std::complex<double>> run(const std::vector<std::complex<double>>& in, int n, int sign) {
    if (n <= 0 || in.size() != static_cast<std::size_t>(n) * n) {
        throw std::invalid_argument("fft2d: grid size mismatch");
    }
    fftw_plan p = cache().get(n, sign);
    std::vector<std::complex<double>> out(in.size());
    auto* src = reinterpret_cast<fftw_complex*>(const_cast<std::complex<double>*>(in.data()));
    auto* dst = reinterpret_cast<fftw_complex*>(out.data());
    fftw_execute_dft(p, src, dst);
    return out;
}

}  // namespace

std::vector<std::complex<double>> fft2d(const std::vector<std::complex<double>>& in, int n) {
    return run(in, n, FFTW_FORWARD);
}

std::vector<std::complex<double>> ifft2d(const std::vector<std::complex<double>>& in, int n) {
    auto out = run(in, n, FFTW_BACKWARD);
    const double scale = 1.0 / (static_cast<double>(n) * n);
    for (auto& v : out) v *= scale;
    return out;
}

}  // namespace speckle
