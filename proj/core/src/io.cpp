#include "tl/io.hpp"

#include <fstream>
#include <sstream>

namespace tl {

TensorValue read_text_tensor(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  auto vocab = make_domain("token", 0);
  std::vector<int> tokens;
  std::string word;
  while (in >> word) tokens.push_back(vocab->intern(word));
  auto pos = make_domain("pos", (int)tokens.size());
  TensorValue t = TensorValue::sparse_zeros(Dtype::Boolean,
                                            {{"pos", pos}, {"token", vocab}});
  for (int i = 0; i < (int)tokens.size(); ++i) t.set({i, tokens[i]}, 1.0);
  return t;
}

TensorValue load_tensor_file(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".tns") {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return read_tensor(in).second;
  }
  return read_text_tensor(path);
}

void save_tensor_file(const std::string& path, const std::string& name,
                      const TensorValue& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(out, name, t);
}

}  // namespace tl
